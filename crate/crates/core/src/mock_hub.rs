//! In-process HTTP hub speaking the client's wire protocol, for tests.
//!
//! Thread-per-connection, `Connection: close`, std only.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use crate::hub::RepoKind;

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Default)]
struct Repo {
    revision: u64,
    files: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Default)]
struct State {
    repos: BTreeMap<(String, String), Repo>,
    requests: Vec<RecordedRequest>,
    fail_next: u32,
    required_token: Option<String>,
    quota: Option<usize>,
    uploads_ok: usize,
    fail_uploads_at: Option<(usize, u32)>,
}

/// Handle to a running mock hub; the server thread lives for the process.
#[derive(Clone)]
pub struct MockHub {
    addr: std::net::SocketAddr,
    state: Arc<Mutex<State>>,
}

fn kind_key(kind: RepoKind) -> String {
    kind.plural().to_string()
}

impl MockHub {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock hub");
        let addr = listener.local_addr().expect("local addr");
        let state = Arc::new(Mutex::new(State::default()));
        let shared = state.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let st = shared.clone();
                thread::spawn(move || {
                    let _ = serve(stream, &st);
                });
            }
        });
        MockHub { addr, state }
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn add_repo(&self, kind: RepoKind, repo_id: &str, files: &[(&str, &[u8])]) {
        let mut st = self.state.lock().unwrap();
        let repo = st.repos.entry((kind_key(kind), repo_id.to_string())).or_default();
        repo.revision += 1;
        for (path, data) in files {
            repo.files.insert(path.to_string(), data.to_vec());
        }
    }

    /// Answer the next `n` requests with 500.
    pub fn fail_next(&self, n: u32) {
        self.state.lock().unwrap().fail_next = n;
    }

    /// Uploads must carry this bearer token.
    pub fn require_token(&self, token: &str) {
        self.state.lock().unwrap().required_token = Some(token.to_string());
    }

    /// Max upload body size; larger bodies get 507.
    pub fn set_quota(&self, bytes: usize) {
        self.state.lock().unwrap().quota = Some(bytes);
    }

    /// After `n` successful uploads, fail the next four upload attempts.
    pub fn fail_after_uploads(&self, n: usize) {
        self.state.lock().unwrap().fail_uploads_at = Some((n, 4));
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn request_count(&self) -> usize {
        self.state.lock().unwrap().requests.len()
    }

    pub fn downloads(&self) -> usize {
        self.requests()
            .iter()
            .filter(|r| r.method == "GET" && r.path.contains("/resolve/"))
            .count()
    }

    pub fn uploads(&self) -> Vec<RecordedRequest> {
        self.requests().into_iter().filter(|r| r.method == "PUT").collect()
    }

    pub fn upload_count(&self, file: &str) -> usize {
        self.uploads()
            .iter()
            .filter(|r| r.path.ends_with(&format!("/upload/{file}")))
            .count()
    }

    pub fn files(&self, kind: RepoKind, repo_id: &str) -> Vec<String> {
        let st = self.state.lock().unwrap();
        st.repos
            .get(&(kind_key(kind), repo_id.to_string()))
            .map(|r| r.files.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn file(&self, kind: RepoKind, repo_id: &str, path: &str) -> Option<Vec<u8>> {
        let st = self.state.lock().unwrap();
        st.repos
            .get(&(kind_key(kind), repo_id.to_string()))
            .and_then(|r| r.files.get(path).cloned())
    }
}

fn respond(stream: &mut TcpStream, code: u16, body: &[u8]) -> std::io::Result<()> {
    let reason = match code {
        200 => "OK",
        401 => "Unauthorized",
        404 => "Not Found",
        500 => "Internal Server Error",
        507 => "Insufficient Storage",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {code} {reason}\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()
}

fn serve(mut stream: TcpStream, state: &Mutex<State>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();

    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h)? == 0 || h == "\r\n" || h == "\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            let v = v.trim().to_string();
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = v.parse().unwrap_or(0),
                "authorization" => authorization = Some(v),
                _ => {}
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let (code, out) = {
        let mut st = state.lock().unwrap();
        st.requests.push(RecordedRequest {
            method: method.clone(),
            path: path.clone(),
            authorization: authorization.clone(),
            body: body.clone(),
        });
        route(&mut st, &method, &path, authorization.as_deref(), body)
    };
    respond(&mut stream, code, &out)
}

fn route(st: &mut State, method: &str, path: &str, auth: Option<&str>, body: Vec<u8>) -> (u16, Vec<u8>) {
    if st.fail_next > 0 {
        st.fail_next -= 1;
        return (500, b"transient".to_vec());
    }
    let segs: Vec<&str> = path.trim_start_matches('/').split('/').collect();
    match (method, segs.as_slice()) {
        ("GET", ["api", kind, ns, name, "tree"]) => {
            match st.repos.get(&(kind.to_string(), format!("{ns}/{name}"))) {
                Some(repo) => {
                    let files: Vec<_> = repo
                        .files
                        .keys()
                        .map(|p| serde_json::json!({ "path": p }))
                        .collect();
                    let listing = serde_json::json!({
                        "revision": format!("rev-{}", repo.revision),
                        "files": files,
                    });
                    (200, listing.to_string().into_bytes())
                }
                None => (404, b"no such repo".to_vec()),
            }
        }
        ("GET", [kind, ns, name, "resolve", _rev, rest @ ..]) => {
            let file = rest.join("/");
            match st
                .repos
                .get(&(kind.to_string(), format!("{ns}/{name}")))
                .and_then(|r| r.files.get(&file))
            {
                Some(bytes) => (200, bytes.clone()),
                None => (404, b"no such file".to_vec()),
            }
        }
        ("PUT", ["api", kind, ns, name, "upload", rest @ ..]) => {
            if let Some(required) = &st.required_token {
                if auth != Some(format!("Bearer {required}").as_str()) {
                    return (401, b"bad token".to_vec());
                }
            }
            if let Some((at, budget)) = st.fail_uploads_at {
                if st.uploads_ok >= at && budget > 0 {
                    st.fail_uploads_at = Some((at, budget - 1));
                    return (500, b"upload failed".to_vec());
                }
            }
            if st.quota.is_some_and(|q| body.len() > q) {
                return (507, b"quota".to_vec());
            }
            let repo = st
                .repos
                .entry((kind.to_string(), format!("{ns}/{name}")))
                .or_default();
            repo.revision += 1;
            repo.files.insert(rest.join("/"), body);
            st.uploads_ok += 1;
            (200, b"{}".to_vec())
        }
        _ => (404, b"unknown route".to_vec()),
    }
}
