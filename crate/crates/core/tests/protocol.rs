mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Command, Stdio};

use beta_core::blackbox::{BlackBoxHandle, Server, Transport, CHUNK_SIZE};
use beta_core::tensor::DenseArray;
use beta_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn queries(n: usize, d: usize, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::arr(n, d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect())
}

#[test]
fn socket_and_in_process_agree_on_1000_queries() {
    let task = common::moons();
    let x = queries(1000, 2, 1);
    let mut local = task.black_box();
    let expected = local.predict_hard(&x).unwrap();

    let server = Server::bind(task.model.clone(), "127.0.0.1:0").unwrap();
    let mut remote = BlackBoxHandle::connect(server.local_addr()).unwrap();
    assert_eq!(remote.transport(), Transport::StreamSocket);
    assert_eq!((remote.input_dim(), remote.num_classes()), (2, 2));
    assert_eq!(remote.predict_hard(&x).unwrap(), expected);
    assert_eq!(remote.query_count(), 1000);
    assert_eq!(local.query_count(), 1000);
    server.shutdown();
}

#[test]
fn child_pipe_and_in_process_agree_on_1000_queries() {
    let task = common::blobs();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("source.ckpt");
    task.model.save(&ckpt).unwrap();
    let x = queries(1000, 4, 2);
    let expected = task.black_box().predict_hard(&x).unwrap();

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_beta"));
    cmd.args(["serve", "--stdio", "--checkpoint"]).arg(&ckpt);
    let mut piped = BlackBoxHandle::spawn(cmd).unwrap();
    assert_eq!(piped.transport(), Transport::ChildPipe);
    assert_eq!(piped.num_classes(), 4);
    assert_eq!(piped.predict_hard(&x).unwrap(), expected);
}

#[test]
fn pipelined_requests_keep_their_ids() {
    let task = common::moons();
    let server = Server::bind(task.model.clone(), "127.0.0.1:0").unwrap();
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let x = queries(1000, 2, 3);
    let mut body = String::new();
    for i in 0..1000 {
        let row = x.row(i);
        body.push_str(&format!("{{\"id\":{},\"x\":[{},{}]}}\n", 5000 + i, row[0], row[1]));
    }
    writer.write_all(body.as_bytes()).unwrap();
    let expected = task.black_box().predict_hard(&x).unwrap();
    let mut reader = BufReader::new(stream);
    let mut seen = vec![false; 1000];
    for _ in 0..1000 {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let i = (v["id"].as_u64().unwrap() - 5000) as usize;
        assert!(!seen[i]);
        seen[i] = true;
        assert_eq!(v["label"].as_u64().unwrap() as usize, expected[i]);
    }
    assert!(seen.iter().all(|&s| s));
    server.shutdown();
}

#[test]
fn wrong_width_gets_dim_error_and_connection_survives() {
    let task = common::moons();
    let server = Server::bind(task.model.clone(), "127.0.0.1:0").unwrap();
    let stream = TcpStream::connect(server.local_addr()).unwrap();
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut ask = |req: &str| {
        writeln!(writer, "{req}").unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        serde_json::from_str::<serde_json::Value>(&line).unwrap()
    };
    assert_eq!(ask(r#"{"id":3,"x":[1.0,2.0,3.0]}"#), serde_json::json!({"id":3,"error":"dim"}));
    assert_eq!(ask("not json")["error"], "parse");
    let ok = ask(r#"{"id":4,"x":[0.1,0.2]}"#);
    assert_eq!(ok["id"], 4);
    assert!(ok["label"].as_u64().unwrap() < 2);
    server.shutdown();
}

#[test]
fn handle_rejects_wrong_width_before_sending() {
    let task = common::moons();
    let mut bb = task.black_box();
    assert!(matches!(bb.predict_hard(&DenseArray::zeros(3, 5)), Err(Error::Dimension(_))));
    assert_eq!(bb.query_count(), 0);
}

#[test]
fn unreachable_server_reports_retries() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    match BlackBoxHandle::connect(addr) {
        Err(Error::Query { retries, .. }) => assert!(retries >= 1),
        other => panic!("expected a query error, got {other:?}"),
    }
}

#[test]
fn server_restart_is_survived_by_retry() {
    let task = common::moons();
    let server = Server::bind(task.model.clone(), "127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    let mut bb = BlackBoxHandle::connect(addr).unwrap();
    let x = queries(CHUNK_SIZE + 10, 2, 4);
    let first = bb.predict_hard(&x).unwrap();
    server.shutdown();
    let again = Server::bind(task.model.clone(), addr).unwrap();
    assert_eq!(bb.predict_hard(&x).unwrap(), first);
    again.shutdown();
}

#[test]
fn malformed_server_reply_is_a_protocol_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let fake = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        writeln!(writer, "{}", serde_json::json!({"id": v["id"], "classes": 2, "dim": 2})).unwrap();
        line.clear();
        reader.read_line(&mut line).unwrap();
        writeln!(writer, "{{\"id\":0,\"label\":\"seven\"}}").unwrap();
        let _ = reader.read_line(&mut line);
    });
    let mut bb = BlackBoxHandle::connect(addr).unwrap().with_max_retries(0);
    assert!(matches!(bb.predict_hard(&DenseArray::zeros(1, 2)), Err(Error::Protocol(_))));
    drop(bb);
    fake.join().unwrap();
}

#[test]
fn stdio_server_answers_in_a_child_process() {
    let task = common::moons();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    task.model.save(&ckpt).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_beta"))
        .args(["serve", "--stdio", "--checkpoint"])
        .arg(&ckpt)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"id":1,"info":true}}"#).unwrap();
    writeln!(stdin, r#"{{"id":2,"x":[0.0,0.0]}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0], serde_json::json!({"id":1,"classes":2,"dim":2}));
    assert_eq!(lines[1]["id"], 2);
}
