/// Step-decay schedule: `lr0 · gamma^⌊epoch / step_size⌋`.
pub fn step_decay_lr(lr0: f64, step_size: usize, gamma: f64, epoch: usize) -> f64 {
    let step_size = step_size.max(1);
    lr0 * gamma.powi((epoch / step_size) as i32)
}
