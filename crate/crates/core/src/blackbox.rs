//! The frozen source model behind a hard-label query interface.
//!
//! [`BlackBoxHandle`] is the only way the adaptation code reaches the
//! source model. It answers with class indices and nothing else, whether the
//! model lives in-process, behind a TCP socket or in a child process.
//!
//! Wire protocol: newline-delimited JSON over a byte stream.
//!
//! ```text
//! -> {"id":7,"x":[0.1,0.2]}
//! <- {"id":7,"label":1}
//! -> {"id":8,"x":[0.1]}
//! <- {"id":8,"error":"dim"}
//! -> {"id":9,"info":true}
//! <- {"id":9,"classes":2,"dim":2}
//! ```

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{LabeledVectorSet, Standardizer};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_graph;
use crate::nn::{MlpClassifier, SgdState};
use crate::tensor::{argmax, one_hot, DenseArray};

/// Requests per pipelined chunk.
pub const CHUNK_SIZE: usize = 256;
pub const DEFAULT_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    InProcess,
    StreamSocket,
    ChildPipe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Request {
    id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    info: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Response {
    id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

/// Hard-label decision of a model: argmax of its probabilities, lowest
/// index on ties.
fn hard_labels(model: &MlpClassifier, batch: &DenseArray) -> Result<Vec<usize>> {
    Ok(model.forward(batch)?.row_iter().map(argmax).collect())
}

struct Connection<R, W> {
    reader: R,
    writer: W,
    next_id: u64,
}

impl<R: BufRead, W: Write> Connection<R, W> {
    fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            next_id: 0,
        }
    }

    fn read_response(&mut self) -> io::Result<Response> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the stream"));
        }
        serde_json::from_str(line.trim_end())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, ProtocolFault(format!("{e}: {line:?}"))))
    }

    fn info(&mut self) -> io::Result<Response> {
        let id = self.next_id;
        self.next_id += 1;
        let req = Request { id, x: None, info: true };
        writeln!(self.writer, "{}", serde_json::to_string(&req).expect("serializable"))?;
        self.writer.flush()?;
        self.read_response()
    }

    /// Pipelines one chunk and matches responses by id.
    fn query_chunk(&mut self, rows: &[&[f64]]) -> io::Result<Vec<usize>> {
        let base = self.next_id;
        self.next_id += rows.len() as u64;
        let mut buf = String::new();
        for (i, row) in rows.iter().enumerate() {
            let req = Request {
                id: base + i as u64,
                x: Some(row.to_vec()),
                info: false,
            };
            buf.push_str(&serde_json::to_string(&req).expect("serializable"));
            buf.push('\n');
        }
        self.writer.write_all(buf.as_bytes())?;
        self.writer.flush()?;

        let mut labels: HashMap<u64, usize> = HashMap::with_capacity(rows.len());
        while labels.len() < rows.len() {
            let resp = self.read_response()?;
            let fault = |m: String| io::Error::new(io::ErrorKind::InvalidData, ProtocolFault(m));
            let id = resp.id.ok_or_else(|| fault(format!("response without id: {:?}", resp.error)))?;
            if id < base || id >= base + rows.len() as u64 {
                return Err(fault(format!("unexpected response id {id}")));
            }
            if let Some(err) = resp.error {
                return Err(fault(format!("server error for id {id}: {err}")));
            }
            let label = resp.label.ok_or_else(|| fault(format!("response {id} has no label")))?;
            if labels.insert(id, label).is_some() {
                return Err(fault(format!("duplicate response id {id}")));
            }
        }
        Ok((0..rows.len() as u64).map(|i| labels[&(base + i)]).collect())
    }
}

/// Marker carried inside `io::Error` for replies that parsed but broke the protocol.
#[derive(Debug)]
struct ProtocolFault(String);

impl std::fmt::Display for ProtocolFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ProtocolFault {}

fn protocol_fault(e: &io::Error) -> Option<String> {
    e.get_ref()
        .and_then(|inner| inner.downcast_ref::<ProtocolFault>())
        .map(|p| p.0.clone())
}

type TcpConnection = Connection<BufReader<TcpStream>, TcpStream>;

enum Backend {
    InProcess(MlpClassifier),
    Socket {
        addr: SocketAddr,
        conn: Option<TcpConnection>,
        max_retries: usize,
    },
    Pipe {
        child: Child,
        conn: Connection<BufReader<ChildStdout>, ChildStdin>,
    },
}

/// Opaque hard-label oracle.
pub struct BlackBoxHandle {
    backend: Backend,
    input_dim: usize,
    num_classes: usize,
    queries: u64,
}

impl std::fmt::Debug for BlackBoxHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlackBoxHandle")
            .field("transport", &self.transport())
            .field("input_dim", &self.input_dim)
            .field("num_classes", &self.num_classes)
            .field("queries", &self.queries)
            .finish()
    }
}

fn connect_tcp(addr: SocketAddr) -> io::Result<TcpConnection> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    Ok(Connection::new(BufReader::new(stream.try_clone()?), stream))
}

fn info_dims(resp: Response) -> Result<(usize, usize)> {
    match (resp.dim, resp.classes) {
        (Some(d), Some(k)) if d > 0 && k > 0 => Ok((d, k)),
        _ => Err(Error::Protocol(format!("bad info response: {resp:?}"))),
    }
}

impl BlackBoxHandle {
    pub fn in_process(model: MlpClassifier) -> Self {
        Self {
            input_dim: model.input_dim(),
            num_classes: model.num_classes(),
            backend: Backend::InProcess(model),
            queries: 0,
        }
    }

    /// Connects to a running server and asks it for its input width and class count.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| Error::Query { retries: 0, source: e })?
            .next()
            .ok_or_else(|| Error::Protocol("address resolved to nothing".into()))?;
        let mut attempt = 0;
        let (conn, info) = loop {
            match connect_tcp(addr).and_then(|mut c| c.info().map(|info| (c, info))) {
                Ok(pair) => break pair,
                Err(e) if protocol_fault(&e).is_some() => return Err(classify(attempt)(e)),
                Err(e) if attempt >= DEFAULT_RETRIES => return Err(Error::Query { retries: attempt, source: e }),
                Err(_) => {
                    attempt += 1;
                    thread::sleep(Duration::from_millis(50 * attempt as u64));
                }
            }
        };
        let (input_dim, num_classes) = info_dims(info)?;
        Ok(Self {
            backend: Backend::Socket {
                addr,
                conn: Some(conn),
                max_retries: DEFAULT_RETRIES,
            },
            input_dim,
            num_classes,
            queries: 0,
        })
    }

    /// Spawns a process that speaks the protocol on stdin/stdout.
    pub fn spawn(mut command: Command) -> Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Query { retries: 0, source: e })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut conn = Connection::new(BufReader::new(stdout), stdin);
        let (input_dim, num_classes) = info_dims(conn.info().map_err(classify(0))?)?;
        Ok(Self {
            backend: Backend::Pipe { child, conn },
            input_dim,
            num_classes,
            queries: 0,
        })
    }

    pub fn with_max_retries(mut self, retries: usize) -> Self {
        if let Backend::Socket { max_retries, .. } = &mut self.backend {
            *max_retries = retries;
        }
        self
    }

    pub fn transport(&self) -> Transport {
        match self.backend {
            Backend::InProcess(_) => Transport::InProcess,
            Backend::Socket { .. } => Transport::StreamSocket,
            Backend::Pipe { .. } => Transport::ChildPipe,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Samples answered so far.
    pub fn query_count(&self) -> u64 {
        self.queries
    }

    /// One hard label per row.
    pub fn predict_hard(&mut self, batch: &DenseArray) -> Result<Vec<usize>> {
        let (n, d) = batch.dims();
        if d != self.input_dim {
            return Err(Error::Dimension(format!(
                "batch has {d} columns, black box expects {}",
                self.input_dim
            )));
        }
        let labels = match &mut self.backend {
            Backend::InProcess(model) => hard_labels(model, batch)?,
            Backend::Pipe { conn, .. } => {
                let rows: Vec<&[f64]> = batch.row_iter().collect();
                let mut out = Vec::with_capacity(n);
                for chunk in rows.chunks(CHUNK_SIZE) {
                    out.extend(conn.query_chunk(chunk).map_err(classify(0))?);
                }
                out
            }
            Backend::Socket {
                addr,
                conn,
                max_retries,
            } => {
                let rows: Vec<&[f64]> = batch.row_iter().collect();
                let mut out = Vec::with_capacity(n);
                for chunk in rows.chunks(CHUNK_SIZE) {
                    out.extend(socket_chunk(*addr, conn, *max_retries, chunk)?);
                }
                out
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Protocol(format!(
                "label {bad} outside 0..{}",
                self.num_classes
            )));
        }
        self.queries += n as u64;
        Ok(labels)
    }
}

fn classify(retries: usize) -> impl Fn(io::Error) -> Error {
    move |e| match protocol_fault(&e) {
        Some(msg) => Error::Protocol(msg),
        None => Error::Query { retries, source: e },
    }
}

fn socket_chunk(
    addr: SocketAddr,
    conn: &mut Option<TcpConnection>,
    max_retries: usize,
    rows: &[&[f64]],
) -> Result<Vec<usize>> {
    let mut attempt = 0;
    loop {
        let result = match conn {
            Some(c) => c.query_chunk(rows),
            None => connect_tcp(addr).and_then(|c| conn.insert(c).query_chunk(rows)),
        };
        match result {
            Ok(labels) => return Ok(labels),
            Err(e) if protocol_fault(&e).is_some() => return Err(classify(attempt)(e)),
            Err(e) => {
                *conn = None;
                if attempt >= max_retries {
                    return Err(Error::Query {
                        retries: attempt,
                        source: e,
                    });
                }
                attempt += 1;
            }
        }
    }
}

impl Drop for BlackBoxHandle {
    fn drop(&mut self) {
        if let Backend::Pipe { child, .. } = &mut self.backend {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn respond(model: &MlpClassifier, line: &str) -> Response {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(_) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64));
            return Response {
                id,
                error: Some("parse".into()),
                ..Default::default()
            };
        }
    };
    if req.info {
        return Response {
            id: Some(req.id),
            classes: Some(model.num_classes()),
            dim: Some(model.input_dim()),
            ..Default::default()
        };
    }
    let error = |e: &str| Response {
        id: Some(req.id),
        error: Some(e.into()),
        ..Default::default()
    };
    let Some(x) = req.x else {
        return error("missing x");
    };
    if x.len() != model.input_dim() {
        return error("dim");
    }
    let Ok(batch) = DenseArray::new(vec![1, x.len()], x) else {
        return error("non-finite");
    };
    match hard_labels(model, &batch) {
        Ok(labels) => Response {
            id: Some(req.id),
            label: Some(labels[0]),
            ..Default::default()
        },
        Err(_) => error("internal"),
    }
}

/// Answers requests on one stream until EOF. Malformed requests get an
/// error response; the stream stays open.
pub fn serve_stream(model: &MlpClassifier, reader: impl BufRead, mut writer: impl Write) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = respond(model, line.trim());
        writeln!(writer, "{}", serde_json::to_string(&resp).expect("serializable"))?;
        writer.flush()?;
    }
    Ok(())
}

/// A TCP server answering hard-label queries on its own threads.
pub struct Server {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds and starts serving in the background.
    pub fn bind(model: MlpClassifier, addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Query { retries: 0, source: e })?;
        let local_addr = listener
            .local_addr()
            .map_err(|e| Error::Query { retries: 0, source: e })?;
        let stop = Arc::new(AtomicBool::new(false));
        let model = Arc::new(model);
        let flag = Arc::clone(&stop);
        let accept = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let model = Arc::clone(&model);
                thread::spawn(move || {
                    let _ = stream.set_nodelay(true);
                    if let Ok(read_half) = stream.try_clone() {
                        let _ = serve_stream(&model, BufReader::new(read_half), stream);
                    }
                });
            }
        });
        Ok(Self {
            local_addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept()
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.accept.is_some() {
            self.stop_accepting();
        }
    }
}

/// Supervised training settings for the source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a classifier on the labeled source split with cross-entropy.
///
/// Features are standardized with source statistics during training and the
/// affine map is folded into the first layer, so the returned model takes
/// raw features.
pub fn train_source_model(
    source: &LabeledVectorSet,
    num_classes: usize,
    config: &SourceConfig,
) -> Result<MlpClassifier> {
    let labels = source
        .source_labels()
        .ok_or_else(|| Error::Config("source set has no labels".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Config(format!("label {bad} outside 0..{num_classes}")));
    }
    let mut present = vec![false; num_classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Config("source set needs at least two classes".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let standardizer = Standardizer::fit(source.features());
    let x = standardizer.apply(source.features());
    let mut widths = vec![source.dim()];
    widths.extend(&config.hidden);
    widths.push(num_classes);
    let mut net = MlpClassifier::new(&widths, config.seed)?;
    let mut sgd = SgdState::for_mlp(&net, config.lr, config.lr, config.momentum, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x50_75_72_63);
    let targets: Vec<f64> = labels.iter().flat_map(|&l| one_hot(l, num_classes)).collect();
    let targets = DenseArray::from_raw(labels.len(), num_classes, targets);
    let mut order: Vec<usize> = (0..source.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let xb = tape.constant(x.select_rows(batch));
            let z = bound.logits(&mut tape, xb)?;
            let loss = cross_entropy_graph(&mut tape, z, &targets.select_rows(batch))?;
            total += loss.value * batch.len() as f64;
            sgd.backward_and_step(&mut net, &tape, bound.params(), loss.var()?)?;
        }
        log::debug!("source epoch {epoch}: ce {:.4}", total / source.len() as f64);
    }

    fold_standardizer(&mut net, &standardizer);
    let acc = accuracy(&net.predict(source.features())?, labels);
    log::info!("source model trained: {} epochs, train accuracy {acc:.4}", config.epochs);
    Ok(net)
}

/// Folds `x -> (x - mean) / std` into the first layer.
pub(crate) fn fold_standardizer(net: &mut MlpClassifier, st: &Standardizer) {
    let first = &mut net.layers_mut()[0];
    let (d, h) = first.weight.dims();
    let mut shift = vec![0.0; h];
    let w = first.weight.values_mut();
    for j in 0..d {
        for c in 0..h {
            w[j * h + c] /= st.std[j];
            shift[c] += st.mean[j] * w[j * h + c];
        }
    }
    for (b, s) in first.bias.values_mut().iter_mut().zip(shift) {
        *b -= s;
    }
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
