//! The service over real sockets: protocol, budget under load, remote/local parity.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use extraction_lab::data::{generate_proxy_pool, DatasetSpec, Generator};
use extraction_lab::oracle::{BudgetStatus, CountingOracle};
use extraction_lab::{
    run_aspkd, seeded_rng, AspkdConfig, AttackError, AttackMode, LabelMode, LocalOracle, Network, NetworkSpec, Oracle,
    OracleError, OracleResponse, ProxyPool, TrainConfig,
};
use extraction_lab_service::{serve, serve_oracle, RemoteOracle, ServiceConfig, ServiceError, ServiceHandle};

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn teacher() -> Network {
    Network::xavier_init(NetworkSpec::new(4, vec![8], 3).unwrap(), &mut seeded_rng(9)).unwrap()
}

fn start(mode: LabelMode, limit: usize) -> ServiceHandle {
    serve_oracle(LocalOracle::new(teacher(), mode, limit), any_port()).unwrap()
}

fn raw_post(url: &str, body: &str) -> (u16, serde_json::Value) {
    let resp = reqwest::blocking::Client::new()
        .post(format!("{url}/v1/predict"))
        .header("content-type", "application/json")
        .body(body.to_owned())
        .send()
        .unwrap();
    let status = resp.status().as_u16();
    (status, serde_json::from_slice(&resp.bytes().unwrap()).unwrap())
}

#[test]
fn meta_and_budget_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.json");
    teacher().save_checkpoint(&path).unwrap();
    let handle = serve(&ServiceConfig {
        bind: any_port(),
        checkpoint: path,
        label_mode: LabelMode::Hard,
        budget_limit: 7,
    })
    .unwrap();
    let meta: serde_json::Value = reqwest::blocking::get(format!("{}/v1/meta", handle.url()))
        .unwrap()
        .json_body();
    assert_eq!(meta, serde_json::json!({"label_mode": "hard", "num_classes": 3, "input_dim": 4}));

    let remote = RemoteOracle::connect(&handle.url()).unwrap();
    assert_eq!(remote.budget_status().unwrap(), BudgetStatus { used: 0, limit: 7 });
    remote.query(&[0.0; 4]).unwrap();
    assert_eq!(remote.budget_status().unwrap(), BudgetStatus { used: 1, limit: 7 });
    handle.shutdown().unwrap();
}

trait JsonBody {
    fn json_body(self) -> serde_json::Value;
}

impl JsonBody for reqwest::blocking::Response {
    fn json_body(self) -> serde_json::Value {
        serde_json::from_slice(&self.bytes().unwrap()).unwrap()
    }
}

#[test]
fn bad_requests_get_400_and_cost_nothing() {
    let handle = start(LabelMode::Soft, 5);
    let (status, body) = raw_post(&handle.url(), r#"{"features":[1.0,2.0]}"#);
    assert_eq!(status, 400);
    assert_eq!(body["error"], "dimension_mismatch");
    let (status, body) = raw_post(&handle.url(), r#"{"features":"nope"}"#);
    assert_eq!(status, 400);
    assert_eq!(body, serde_json::json!({"error": "malformed_request"}));
    let (status, _) = raw_post(&handle.url(), "not json");
    assert_eq!(status, 400);

    let remote = RemoteOracle::connect(&handle.url()).unwrap();
    assert_eq!(
        remote.query(&[1.0]),
        Err(OracleError::DimensionMismatch { expected: 4, got: 1 })
    );
    assert_eq!(remote.budget_status().unwrap().used, 0);
}

#[test]
fn soft_and_hard_bodies() {
    let soft = start(LabelMode::Soft, 5);
    let (status, body) = raw_post(&soft.url(), r#"{"features":[0.5,-1.0,2.0,0.0]}"#);
    assert_eq!(status, 200);
    assert_eq!(body["kind"], "soft");
    assert_eq!(body.as_object().unwrap().len(), 2);
    let probs: Vec<f64> = serde_json::from_value(body["probs"].clone()).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let hard = start(LabelMode::Hard, 5);
    let (status, body) = raw_post(&hard.url(), r#"{"features":[0.5,-1.0,2.0,0.0]}"#);
    assert_eq!(status, 200);
    assert_eq!(body["kind"], "hard");
    assert_eq!(body.as_object().unwrap().len(), 2);
    let local = LocalOracle::new(teacher(), LabelMode::Hard, 1);
    assert_eq!(body["label"], local.query(&[0.5, -1.0, 2.0, 0.0]).unwrap().class());
}

#[test]
fn budget_exhaustion_is_429() {
    let handle = start(LabelMode::Hard, 3);
    for _ in 0..3 {
        assert_eq!(raw_post(&handle.url(), r#"{"features":[0,0,0,0]}"#).0, 200);
    }
    let (status, body) = raw_post(&handle.url(), r#"{"features":[0,0,0,0]}"#);
    assert_eq!(status, 429);
    assert_eq!(body, serde_json::json!({"error": "budget_exhausted", "used": 3, "limit": 3}));
    let remote = RemoteOracle::connect(&handle.url()).unwrap();
    assert_eq!(remote.query(&[0.0; 4]), Err(OracleError::BudgetExhausted { used: 3, limit: 3 }));
}

#[test]
fn sixteen_concurrent_clients_get_exactly_the_limit() {
    let handle = start(LabelMode::Soft, 100);
    let url = handle.url();
    let ok = Arc::new(AtomicUsize::new(0));
    let refused = Arc::new(AtomicUsize::new(0));
    std::thread::scope(|s| {
        for w in 0..16 {
            let (url, ok, refused) = (url.clone(), ok.clone(), refused.clone());
            s.spawn(move || {
                let client = reqwest::blocking::Client::new();
                for i in 0..12 {
                    let body = format!(r#"{{"features":[{w},{i},0.5,-0.5]}}"#);
                    let status = client
                        .post(format!("{url}/v1/predict"))
                        .header("content-type", "application/json")
                        .body(body)
                        .send()
                        .unwrap()
                        .status()
                        .as_u16();
                    match status {
                        200 => ok.fetch_add(1, Ordering::SeqCst),
                        429 => refused.fetch_add(1, Ordering::SeqCst),
                        other => panic!("unexpected status {other}"),
                    };
                }
            });
        }
    });
    assert_eq!(ok.load(Ordering::SeqCst), 100);
    assert_eq!(refused.load(Ordering::SeqCst), 16 * 12 - 100);
    let remote = RemoteOracle::connect(&url).unwrap();
    assert_eq!(remote.budget_status().unwrap(), BudgetStatus { used: 100, limit: 100 });
}

fn pool(seed: u64) -> ProxyPool {
    let spec = DatasetSpec {
        generator: Generator::GaussianBlobs,
        num_classes: 3,
        input_dim: 4,
        per_class_count: 30,
        class_separation: 2.0,
        noise_scale: 0.5,
        distribution_shift: 0.0,
        seed,
    };
    generate_proxy_pool(&spec, &mut seeded_rng(seed)).unwrap()
}

fn cfg(label_mode: LabelMode) -> AspkdConfig {
    AspkdConfig {
        per_class_budget: 5,
        label_mode,
        mode: AttackMode::Full,
        train: TrainConfig {
            max_epochs: 6,
            patience: 3,
            ..TrainConfig::student()
        },
        ..AspkdConfig::default()
    }
}

#[test]
fn remote_attack_is_bitwise_equal_to_local() {
    let student = NetworkSpec::new(4, vec![6, 5], 3).unwrap();
    for label_mode in [LabelMode::Soft, LabelMode::Hard] {
        let local = LocalOracle::new(teacher(), label_mode, 15);
        let mut local_pool = pool(1);
        let a = run_aspkd(&local, &mut local_pool, &student, &cfg(label_mode), &mut seeded_rng(2)).unwrap();

        let handle = start(label_mode, 15);
        let remote = CountingOracle::new(RemoteOracle::connect(&handle.url()).unwrap());
        let mut remote_pool = pool(1);
        let b = run_aspkd(&remote, &mut remote_pool, &student, &cfg(label_mode), &mut seeded_rng(2)).unwrap();

        assert_eq!(a.student.to_checkpoint_string(), b.student.to_checkpoint_string());
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(local_pool, remote_pool);
        // Server-side and client-side accounting agree.
        assert_eq!(remote.inner().budget_status().unwrap().used, remote.counts().successes);
        assert_eq!(remote.counts().successes, 15);
    }
}

/// Stops the service after a fixed number of answered queries.
struct KillAfter {
    inner: RemoteOracle,
    remaining: AtomicUsize,
    handle: Mutex<Option<ServiceHandle>>,
}

impl Oracle for KillAfter {
    fn query(&self, sample: &[f64]) -> Result<OracleResponse, OracleError> {
        if self.remaining.fetch_sub(1, Ordering::SeqCst) == 0 {
            if let Some(h) = self.handle.lock().unwrap().take() {
                h.shutdown().unwrap();
            }
        }
        self.inner.query(sample)
    }
    fn budget_status(&self) -> Result<BudgetStatus, OracleError> {
        self.inner.budget_status()
    }
    fn label_mode(&self) -> LabelMode {
        self.inner.label_mode()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
}

#[test]
fn killing_the_server_mid_run_is_a_transport_error() {
    let handle = start(LabelMode::Soft, 15);
    let oracle = KillAfter {
        inner: RemoteOracle::connect(&handle.url()).unwrap(),
        remaining: AtomicUsize::new(7),
        handle: Mutex::new(Some(handle)),
    };
    let mut p = pool(3);
    let student = NetworkSpec::new(4, vec![6, 5], 3).unwrap();
    let err = run_aspkd(&oracle, &mut p, &student, &cfg(LabelMode::Soft), &mut seeded_rng(3)).unwrap_err();
    assert!(matches!(err, AttackError::Oracle(OracleError::Transport(_))), "{err:?}");
}

#[test]
fn startup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not a checkpoint").unwrap();
    let cfg = ServiceConfig {
        bind: any_port(),
        checkpoint: bad,
        label_mode: LabelMode::Soft,
        budget_limit: 1,
    };
    assert!(matches!(serve(&cfg), Err(ServiceError::Checkpoint { .. })));
    let missing = ServiceConfig {
        checkpoint: dir.path().join("missing.json"),
        ..cfg.clone()
    };
    assert!(matches!(serve(&missing), Err(ServiceError::Checkpoint { .. })));

    let first = start(LabelMode::Soft, 1);
    let taken = serve_oracle(LocalOracle::new(teacher(), LabelMode::Soft, 1), first.addr());
    assert!(matches!(taken, Err(ServiceError::Bind { .. })));

    assert!(matches!(
        RemoteOracle::connect("http://127.0.0.1:1"),
        Err(OracleError::Transport(_))
    ));
}
