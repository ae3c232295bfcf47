mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use common::random_ngram_pair;
use snapdiff::search::{beam_search, halving_schedule, SearchConfig};
use snapdiff::vocab::Vocabulary;
use snapdiff::wire::{handle_connection, serve, ExternOracle};
use snapdiff::{differential_score, FixedOracle, ModelOracle, Scoring};

const REQUESTS: &str = include_str!("golden/session.requests");
const RESPONSES: &str = include_str!("golden/session.responses");
const NAME: &str = "toy \"fixed\"";

fn toy() -> FixedOracle {
    let v = Vocabulary::with_words(&["a", "b", "c", "d", "e", "f"]).unwrap();
    FixedOracle::new(v, vec![0.0, 0.0, 0.0, 0.35, 0.25, 0.2, 0.1, 0.05, 0.05]).unwrap()
}

fn check_golden(got: &str) {
    let got: Vec<&str> = got.lines().collect();
    let want: Vec<&str> = RESPONSES.lines().collect();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        if w.ends_with('}') {
            assert_eq!(g, w);
        } else {
            assert!(g.starts_with(w), "{g}");
            let v: serde_json::Value = serde_json::from_str(g).unwrap();
            assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()));
        }
    }
}

fn spawn(oracle: Arc<dyn ModelOracle>, name: &str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let name = name.to_string();
    std::thread::spawn(move || serve(listener, oracle, name));
    addr
}

#[test]
fn golden_session_in_memory() {
    let mut out = Vec::new();
    handle_connection(&toy(), NAME, REQUESTS.as_bytes(), &mut out).unwrap();
    check_golden(&String::from_utf8(out).unwrap());
}

#[test]
fn golden_session_over_tcp() {
    let addr = spawn(Arc::new(toy()), NAME);
    let mut stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut got = String::new();
    for req in REQUESTS.lines() {
        writeln!(stream, "{req}").unwrap();
        reader.read_line(&mut got).unwrap();
    }
    check_golden(&got);
}

#[test]
fn repeated_queries_return_identical_bytes() {
    let (_, u) = random_ngram_pair(3, 8, 3);
    let mut out = Vec::new();
    let req = "{\"id\":1,\"op\":\"dist\",\"prefix\":[4,5]}\n";
    handle_connection(&u, "m", format!("{req}{req}").as_bytes(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], lines[1]);
}

#[test]
fn handshake_reports_vocab() {
    let (m, _) = random_ngram_pair(1, 8, 3);
    let addr = spawn(Arc::new(m.clone()), "base");
    let ext = ExternOracle::connect(&addr, None).unwrap();
    assert_eq!(ext.vocab().len(), m.vocab().len());
    assert_eq!(ext.name(), "base");
    assert!(ext.vocab().is_opaque());
    let wrong = Vocabulary::with_words(&["x"]).unwrap();
    assert!(ExternOracle::connect(&addr, Some(wrong)).is_err());
}

#[test]
fn extern_oracle_matches_in_process() {
    let (m, u) = random_ngram_pair(11, 9, 3);
    let addr_m = spawn(Arc::new(m.clone()), "base");
    let addr_u = spawn(Arc::new(u.clone()), "updated");
    let em = ExternOracle::connect(&addr_m, Some(m.vocab().clone())).unwrap();
    let eu = ExternOracle::connect(&addr_u, Some(u.vocab().clone())).unwrap();

    for prefix in common::enumerate(&m.vocab().searchable_ids(), 2) {
        let (a, b) = (m.next_dist(&prefix).unwrap(), em.next_dist(&prefix).unwrap());
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
    let top = eu.next_topk(&[4], 3).unwrap();
    let want = u.next_dist(&[4]).unwrap();
    assert_eq!(top.iter().map(|p| p.0).collect::<Vec<_>>(), want.top_k(3));
    for (t, lp) in top {
        assert!((lp - want.log_prob(t)).abs() <= 1e-12);
    }

    let cfg = SearchConfig::new(3, halving_schedule(9, 3, 4).unwrap(), Scoring::Absolute);
    let local = beam_search(&m, &u, &cfg).unwrap();
    let remote = beam_search(&em, &eu, &cfg).unwrap();
    assert_eq!(local.len(), remote.len());
    for (l, r) in local.iter().zip(&remote) {
        assert!((l.score - r.score).abs() <= 1e-9);
        let again = differential_score(&em, &eu, &r.seq).unwrap().score;
        assert!((again - differential_score(&m, &u, &r.seq).unwrap().score).abs() <= 1e-9);
    }
}
