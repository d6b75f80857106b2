use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use cipherbench::backends::{
    analytic_positive_rate, BackendConfig, HttpBackend, SyntheticTask, API_KEY_ENV,
};
use cipherbench::lexicon::build_frequency;
use cipherbench::tokenization::DEFAULT_MARKER;
use cipherbench::{TokenizerSpec, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[test]
fn frequency_table_matches_independent_count() {
    let lines: Vec<String> = (0..12).map(|i| format!("w{i} w{i}")).collect();
    let vocab = Vocabulary::induce(lines.iter().map(String::as_str), DEFAULT_MARKER);
    let tok = TokenizerSpec::builtin(vocab);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<String> = (0..500)
        .map(|_| {
            let len = r.random_range(1..9);
            (0..len)
                .map(|_| format!("w{}", r.random_range(0..12)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let table = build_frequency("c", corpus.iter().map(String::as_str), &tok).unwrap();

    let mut oracle: HashMap<String, u64> = HashMap::new();
    for line in &corpus {
        for (i, w) in line.split(' ').enumerate() {
            let surface = if i == 0 {
                w.to_string()
            } else {
                format!("{DEFAULT_MARKER}{w}")
            };
            *oracle.entry(surface).or_default() += 1;
        }
    }
    let vocab = tok.vocab();
    for e in vocab.entries() {
        let want = oracle.get(&e.surface).copied().unwrap_or(0);
        assert_eq!(table.count(e.id), want, "{}", e.surface);
    }
    assert_eq!(table.total(), oracle.values().sum::<u64>());
}

#[test]
fn synthetic_base_rate_matches_analytic() {
    let task = SyntheticTask::new(40, [0.4, 0.2, 0.4], (3, 5), 0);
    let sample = task.sentences("mc", 10_000);
    let positive = sample
        .iter()
        .filter(|i| i.label() == Some("positive"))
        .count();
    let empirical = positive as f64 / sample.len() as f64;
    let analytic = analytic_positive_rate(task.weight_fractions(), (3, 5));
    assert!(
        (empirical - analytic).abs() < 0.05,
        "empirical {empirical:.3} vs analytic {analytic:.3}"
    );
}

#[test]
fn analytic_rate_matches_enumeration() {
    // every word sequence of length 1..=3 over weights [-1, 0, 0, 1, 1]
    let weights = [-1i64, 0, 0, 1, 1];
    let mut total = 0.0;
    for len in 1..=3u32 {
        let n = weights.len().pow(len);
        let hits = (0..n)
            .filter(|&code| {
                let mut c = code;
                let mut sum = 0;
                for _ in 0..len {
                    sum += weights[c % weights.len()];
                    c /= weights.len();
                }
                sum >= 0
            })
            .count();
        total += hits as f64 / n as f64;
    }
    let want = total / 3.0;
    let got = analytic_positive_rate([0.2, 0.4, 0.4], (1, 3));
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

struct Seen {
    auth: Vec<Option<String>>,
    bodies: Vec<Value>,
}

/// Serves `/v1/completions` on a loopback port. Echo requests get two
/// tokens after the prompt whose log-probabilities depend on the candidate.
fn stub_server(requests: usize) -> (String, Arc<Mutex<Seen>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Seen {
        auth: Vec::new(),
        bodies: Vec::new(),
    }));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let reply = respond(&body);
            {
                let mut s = log.lock().unwrap();
                s.auth.push(auth);
                s.bodies.push(body);
            }
            let reply = reply.to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

const PROMPT: &str = "Input: good film\nOutput:";

fn respond(body: &Value) -> Value {
    if body["echo"] != json!(true) {
        return json!({"choices": [{"text": " positive"}]});
    }
    let prompt_len = PROMPT.chars().count() as u64;
    let text = body["prompt"].as_str().unwrap();
    let lps = if text.ends_with(" positive") {
        [-0.5, -0.25]
    } else {
        [-0.1, -2.0]
    };
    json!({"choices": [{"logprobs": {
        "tokens": ["Input", " positive", "x"],
        "token_logprobs": [-3.0, lps[0], lps[1]],
        "text_offset": [0, prompt_len, prompt_len + 2],
    }}]})
}

#[test]
fn http_backend_scores_candidates_by_summed_logprobs() {
    let (url, seen) = stub_server(3);
    let backend = HttpBackend::new(BackendConfig::http(url))
        .unwrap()
        .with_api_key(Some("sekrit".into()));
    let cands = vec![" positive".to_string(), " negative".to_string()];
    let out = backend.http_complete(PROMPT, Some(&cands)).unwrap();
    let scores = out.option_scores.unwrap();
    assert_eq!(scores, vec![-0.75, -2.1]);
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(cands[best], " positive");

    let gen = backend.http_complete(PROMPT, None).unwrap();
    assert_eq!(gen.text, " positive");

    let seen = seen.lock().unwrap();
    assert!(seen
        .auth
        .iter()
        .all(|a| a.as_deref() == Some("Bearer sekrit")));
    assert_eq!(
        seen.bodies[0]["prompt"],
        json!(format!("{PROMPT} positive"))
    );
    assert_eq!(seen.bodies[0]["max_tokens"], json!(0));
    assert_eq!(seen.bodies[2]["temperature"], json!(0));
}

#[test]
fn http_backend_reads_api_key_from_environment() {
    let (url, seen) = stub_server(2);
    std::env::set_var(API_KEY_ENV, "from-env");
    let with_env = HttpBackend::new(BackendConfig::http(url.clone())).unwrap();
    std::env::remove_var(API_KEY_ENV);
    with_env.http_complete(PROMPT, None).unwrap();
    let without = HttpBackend::new(BackendConfig::http(url))
        .unwrap()
        .with_api_key(None);
    without.http_complete(PROMPT, None).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.auth, vec![Some("Bearer from-env".to_string()), None]);
}
