use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use lowcomm::collective::{Collective, TcpCollective};
use lowcomm::config::{Algorithm, ModelKind, RunConfig};
use lowcomm::tensor::Tensor;
use lowcomm::trainer;

fn listeners(n: usize) -> (Vec<TcpListener>, Vec<std::net::SocketAddr>) {
    let ls: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let addrs = ls.iter().map(|l| l.local_addr().unwrap()).collect();
    (ls, addrs)
}

#[test]
fn three_rank_gather_and_mean() {
    let (ls, addrs) = listeners(3);
    let handles: Vec<_> = ls
        .into_iter()
        .enumerate()
        .map(|(rank, l)| {
            let addrs = addrs.clone();
            thread::spawn(move || {
                let mut c = TcpCollective::connect(rank, l, &addrs, Duration::from_secs(10)).unwrap();
                let gathered = c.all_gather(1, &[rank as u8; 5]).unwrap();
                let t = Tensor::from_vec(vec![rank as f32, 1.0]).unwrap();
                let mean = c.all_reduce_mean(2, &[t]).unwrap();
                (gathered, mean, c.meter().clone())
            })
        })
        .collect();
    for h in handles {
        let (gathered, mean, meter) = h.join().unwrap();
        assert_eq!(gathered, vec![vec![0u8; 5], vec![1u8; 5], vec![2u8; 5]]);
        assert_eq!(mean[0].data(), &[1.0, 1.0]);
        // 5 bytes then an 8 + 2*4 byte dense payload, to each of 2 peers
        assert_eq!(meter.bytes_sent, 2 * (5 + 16));
        assert_eq!(meter.bytes_received, 2 * (5 + 16));
    }
}

#[test]
fn tcp_run_matches_local_for_every_algorithm() {
    for algo in [Algorithm::Ddp, Algorithm::Diloco, Algorithm::Demo, Algorithm::DlcMd] {
        let mut cfg = RunConfig {
            algo,
            workers: 3,
            outer_steps: 4,
            inner_steps: 3,
            model: ModelKind::Logistic,
            dim: 6,
            data_size: 300,
            batch: 8,
            topk: 3,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        let ds = Arc::new(trainer::load_dataset(&cfg).unwrap());
        let local = trainer::run_local(&cfg, Arc::clone(&ds), &mut |_| Ok(())).unwrap();
        let tcp = trainer::run_tcp_loopback(&cfg, ds, &mut |_| Ok(())).unwrap();
        assert_eq!(local.metrics, tcp.metrics, "{algo}");
        assert_eq!(local.params, tcp.params, "{algo}");
        for (a, b) in local.meters.iter().zip(&tcp.meters) {
            assert_eq!((a.bytes_sent, a.bytes_received), (b.bytes_sent, b.bytes_received));
        }
    }
}

#[test]
fn missing_peer_times_out() {
    let (mut ls, addrs) = listeners(2);
    // rank 1 never starts, so rank 0 waits for a connection that never comes
    drop(ls.pop());
    let l = ls.pop().unwrap();
    let err = TcpCollective::connect(0, l, &addrs, Duration::from_millis(300)).err().unwrap();
    assert!(err.to_string().contains("never connected"), "{err}");
}
