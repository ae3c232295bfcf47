//! Newline-delimited JSON protocol for serving and querying model oracles.
//!
//! ```text
//! -> {"id":1,"op":"hello"}
//! <- {"id":1,"ok":true,"vocab_size":N,"bos":0,"eos":1,"unk":2,"name":"..."}
//! -> {"id":2,"op":"dist","prefix":[5,9]}
//! <- {"id":2,"ok":true,"logprobs":[...N numbers...]}
//! -> {"id":3,"op":"dist_topk","prefix":[5,9],"k":2}
//! <- {"id":3,"ok":true,"topk":[[7,-0.5],[3,-1.25]]}
//! <- {"id":4,"ok":false,"error":"..."}
//! ```
//!
//! Numbers carry 17 significant digits; negative infinity is the string
//! `"-inf"`. Each connection handles one request at a time.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::oracle::{ModelOracle, ProbDist};
use crate::vocab::{TokenId, Vocabulary};

pub const NEG_INF: &str = "-inf";

/// `%.17g`: shortest of fixed or exponent notation with 17 significant
/// digits, trailing zeros removed. Negative infinity becomes `"-inf"`.
pub fn format_number(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        return format!("\"{NEG_INF}\"");
    }
    assert!(x.is_finite(), "cannot encode {x}");
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        strip_zeros(&format!("{x:.prec$}", prec = (16 - exp) as usize)).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn parse_number(v: &Value) -> Result<f64> {
    match v {
        Value::String(s) if s == NEG_INF => Ok(f64::NEG_INFINITY),
        Value::Number(n) => n.as_f64().ok_or_else(|| Error::Oracle(format!("bad number {n}"))),
        other => Err(Error::Oracle(format!("expected a log-probability, got {other}"))),
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn id_field(id: Option<u64>) -> String {
    id.map_or_else(|| "null".to_string(), |i| i.to_string())
}

#[derive(Deserialize)]
struct Request {
    id: Option<u64>,
    op: String,
    #[serde(default)]
    prefix: Option<Vec<TokenId>>,
    #[serde(default)]
    k: Option<usize>,
}

pub fn error_response(id: Option<u64>, msg: &str) -> String {
    format!("{{\"id\":{},\"ok\":false,\"error\":{}}}", id_field(id), json_string(msg))
}

/// The response line (without newline) for one request line.
pub fn respond(oracle: &dyn ModelOracle, name: &str, line: &str) -> String {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line).ok().and_then(|v| v.get("id")?.as_u64());
            return error_response(id, &format!("malformed request: {e}"));
        }
    };
    match answer(oracle, name, &req) {
        Ok(body) => format!("{{\"id\":{},\"ok\":true,{body}}}", id_field(req.id)),
        Err(e) => error_response(req.id, &e.to_string()),
    }
}

fn answer(oracle: &dyn ModelOracle, name: &str, req: &Request) -> Result<String> {
    let v = oracle.vocab();
    let prefix = || req.prefix.as_deref().ok_or_else(|| Error::Oracle("missing prefix".into()));
    match req.op.as_str() {
        "hello" => Ok(format!(
            "\"vocab_size\":{},\"bos\":{},\"eos\":{},\"unk\":{},\"name\":{}",
            v.len(),
            v.bos(),
            v.eos(),
            v.unk(),
            json_string(name)
        )),
        "dist" => {
            let d = oracle.next_dist(prefix()?)?;
            let nums: Vec<String> = d.log_probs().into_iter().map(format_number).collect();
            Ok(format!("\"logprobs\":[{}]", nums.join(",")))
        }
        "dist_topk" => {
            let k = req.k.ok_or_else(|| Error::Oracle("missing k".into()))?;
            if k < 1 || k > v.len() {
                return Err(Error::Oracle(format!("k must be in 1..={}", v.len())));
            }
            let d = oracle.next_dist(prefix()?)?;
            let pairs: Vec<String> =
                d.top_k(k).into_iter().map(|t| format!("[{t},{}]", format_number(d.log_prob(t)))).collect();
            Ok(format!("\"topk\":[{}]", pairs.join(",")))
        }
        other => Err(Error::Oracle(format!("unknown op {other:?}"))),
    }
}

/// Answer requests line by line until the reader is exhausted.
pub fn handle_connection<R: BufRead, W: Write>(oracle: &dyn ModelOracle, name: &str, reader: R, mut writer: W) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut resp = respond(oracle, name, &line);
        resp.push('\n');
        writer.write_all(resp.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accept connections forever, one thread per connection.
pub fn serve(listener: TcpListener, oracle: Arc<dyn ModelOracle>, name: String) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let oracle = oracle.clone();
        let name = name.clone();
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = handle_connection(&*oracle, &name, reader, stream);
        });
    }
    Ok(())
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn open(addr: &str) -> Result<Self> {
        let sock = addr
            .to_socket_addrs()
            .map_err(|e| Error::Oracle(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| Error::Oracle(format!("{addr}: no address")))?;
        let writer = TcpStream::connect_timeout(&sock, Duration::from_secs(10))
            .map_err(|e| Error::Oracle(format!("cannot reach {addr}: {e}")))?;
        writer.set_nodelay(true)?;
        writer.set_read_timeout(Some(Duration::from_secs(300)))?;
        Ok(Self { reader: BufReader::new(writer.try_clone()?), writer })
    }

    fn call(&mut self, id: u64, body: &str) -> Result<Value> {
        self.writer.write_all(format!("{{\"id\":{id},{body}}}\n").as_bytes())?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(Error::Oracle("connection closed".into()));
        }
        let v: Value = serde_json::from_str(&line)?;
        if v.get("id").and_then(Value::as_u64) != Some(id) {
            return Err(Error::Oracle(format!("response id mismatch for request {id}")));
        }
        if v.get("ok").and_then(Value::as_bool) != Some(true) {
            let msg = v.get("error").and_then(Value::as_str).unwrap_or("unknown error");
            return Err(Error::Oracle(msg.to_string()));
        }
        Ok(v)
    }
}

/// A model served elsewhere over TCP. Connections are pooled so concurrent
/// queries from a parallel search do not serialize on one socket.
pub struct ExternOracle {
    addr: String,
    name: String,
    vocab: Vocabulary,
    pool: Mutex<Vec<Conn>>,
    next_id: std::sync::atomic::AtomicU64,
}

impl ExternOracle {
    /// Connect and handshake. The vocabulary is opaque unless `vocab` is given
    /// and agrees with the handshake.
    pub fn connect(addr: &str, vocab: Option<Vocabulary>) -> Result<Self> {
        let mut conn = Conn::open(addr)?;
        let hello = conn.call(0, "\"op\":\"hello\"")?;
        let field = |k: &str| -> Result<u64> {
            hello.get(k).and_then(Value::as_u64).ok_or_else(|| Error::Oracle(format!("handshake lacks {k}")))
        };
        let size = field("vocab_size")? as usize;
        let (bos, eos, unk) = (field("bos")? as TokenId, field("eos")? as TokenId, field("unk")? as TokenId);
        let opaque = Vocabulary::opaque(size, bos, eos, unk)?;
        let vocab = match vocab {
            Some(v) => {
                v.ensure_compatible(&opaque)?;
                v
            }
            None => opaque,
        };
        let name = hello.get("name").and_then(Value::as_str).unwrap_or("").to_string();
        Ok(Self {
            addr: addr.to_string(),
            name,
            vocab,
            pool: Mutex::new(vec![conn]),
            next_id: std::sync::atomic::AtomicU64::new(1),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, body: &str) -> Result<Value> {
        let id = self.next_id.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let pooled = self.pool.lock().expect("pool lock").pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => Conn::open(&self.addr)?,
        };
        let out = conn.call(id, body)?;
        self.pool.lock().expect("pool lock").push(conn);
        Ok(out)
    }

    fn prefix_json(prefix: &[TokenId]) -> String {
        serde_json::to_string(prefix).expect("ids serialize")
    }

    /// The `k` most likely next tokens with their log-probabilities.
    pub fn next_topk(&self, prefix: &[TokenId], k: usize) -> Result<Vec<(TokenId, f64)>> {
        self.vocab.check_seq(prefix)?;
        let v = self.call(&format!("\"op\":\"dist_topk\",\"prefix\":{},\"k\":{k}", Self::prefix_json(prefix)))?;
        let rows = v.get("topk").and_then(Value::as_array).ok_or_else(|| Error::Oracle("missing topk".into()))?;
        rows.iter()
            .map(|r| {
                let pair = r.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::Oracle("bad topk row".into()))?;
                let id = pair[0].as_u64().ok_or_else(|| Error::Oracle("bad token id".into()))? as TokenId;
                self.vocab.check_id(id)?;
                Ok((id, parse_number(&pair[1])?))
            })
            .collect()
    }
}

impl ModelOracle for ExternOracle {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<ProbDist> {
        self.vocab.check_seq(prefix)?;
        let v = self.call(&format!("\"op\":\"dist\",\"prefix\":{}", Self::prefix_json(prefix)))?;
        let lps = v.get("logprobs").and_then(Value::as_array).ok_or_else(|| Error::Oracle("missing logprobs".into()))?;
        if lps.len() != self.vocab.len() {
            return Err(Error::Oracle(format!("{} log-probabilities for {} tokens", lps.len(), self.vocab.len())));
        }
        let probs = lps.iter().map(|x| parse_number(x).map(f64::exp)).collect::<Result<Vec<f64>>>()?;
        Ok(ProbDist::from_vec(probs))
    }

    fn describe(&self) -> String {
        format!("extern:{}({})", self.addr, self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::FixedOracle;

    #[test]
    fn number_format_matches_printf() {
        // reference strings from printf-style "%.17g"
        let cases = [
            (0.1, "0.10000000000000001"),
            (-0.2231435513142097, "-0.22314355131420971"),
            (1.0, "1"),
            (-1.6094379124341003, "-1.6094379124341003"),
            (1e-5, "1.0000000000000001e-05"),
            (0.0001, "0.0001"),
            (123456789.0, "123456789"),
            (1e17, "1e+17"),
            (1e16, "10000000000000000"),
            (-20.72326583694641, "-20.72326583694641"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(format_number(x), want, "{x}");
        }
        assert_eq!(format_number(f64::NEG_INFINITY), "\"-inf\"");
    }

    #[test]
    fn formatted_numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -7.5e-300, 2.0f64.ln(), -1e-9, 6.02e23] {
            let s = format_number(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn protocol_examples() {
        let v = Vocabulary::with_words(&["a", "b"]).unwrap();
        let m = FixedOracle::new(v, vec![0.0, 0.0, 0.0, 0.8, 0.2]).unwrap();
        assert_eq!(
            respond(&m, "toy", r#"{"id":1,"op":"hello"}"#),
            r#"{"id":1,"ok":true,"vocab_size":5,"bos":0,"eos":1,"unk":2,"name":"toy"}"#
        );
        assert_eq!(
            respond(&m, "toy", r#"{"id":2,"op":"dist_topk","prefix":[],"k":1}"#),
            r#"{"id":2,"ok":true,"topk":[[3,-0.22314355131420971]]}"#
        );
        assert_eq!(
            respond(&m, "toy", r#"{"id":3,"op":"dist","prefix":[3]}"#),
            r#"{"id":3,"ok":true,"logprobs":["-inf","-inf","-inf",-0.22314355131420971,-1.6094379124341003]}"#
        );
        assert!(respond(&m, "toy", r#"{"id":4,"op":"dist","prefix":[9]}"#).starts_with(r#"{"id":4,"ok":false"#));
        assert!(respond(&m, "toy", "not json").starts_with(r#"{"id":null,"ok":false"#));
        assert!(respond(&m, "toy", r#"{"id":5,"op":"dist_topk","prefix":[],"k":0}"#).contains("\"ok\":false"));
        assert!(respond(&m, "toy", r#"{"id":6,"op":"nope"}"#).contains("unknown op"));
    }
}
