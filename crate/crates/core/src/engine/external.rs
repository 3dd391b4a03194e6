//! External-process backends: one JSON request per line on the child's
//! stdin, one JSON response per line on its stdout.
//!
//! Requests carry `"op"` plus the image path and size where relevant.
//! Responses are `{"ok": true, "result": ...}` or
//! `{"ok": false, "error": "..."}`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backends::{
    BackendError, BackendRole, BackendSuite, CaptionRequest, Captioner, Decomposer, ImageView, PartProposal,
    PartSegmentRequest, PartSegmenter, PromptableSegmenter, ScoreRequest, Scorer, SegmentRequest,
};
use super::bbox::BBox;
use super::EngineError;
use crate::mask::{rle_decode, rle_encode, BinaryMask, RleMask};

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePart {
    part: String,
    object: String,
    mask: RleMask,
    bbox: BBox,
}

struct Pipe {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalBackend {
    role: BackendRole,
    child: Mutex<Child>,
    pipe: Mutex<Pipe>,
}

impl ExternalBackend {
    pub fn spawn(role: BackendRole, command: &[String]) -> Result<Self, EngineError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EngineError::Config(format!("{}: empty command", role.as_str())))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EngineError::Config(format!("{}: cannot start `{program}`: {e}", role.as_str())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            role,
            child: Mutex::new(child),
            pipe: Mutex::new(Pipe { stdin, stdout }),
        })
    }

    fn call(&self, request: Value) -> Result<Value, BackendError> {
        let name = self.role.as_str();
        let mut pipe = self.pipe.lock().map_err(|_| BackendError(format!("{name}: poisoned")))?;
        let line = request.to_string();
        writeln!(pipe.stdin, "{line}")
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| BackendError(format!("{name}: write failed: {e}")))?;
        let mut reply = String::new();
        let n = pipe
            .stdout
            .read_line(&mut reply)
            .map_err(|e| BackendError(format!("{name}: read failed: {e}")))?;
        if n == 0 {
            return Err(BackendError(format!("{name}: process closed its output")));
        }
        let resp: Response =
            serde_json::from_str(&reply).map_err(|e| BackendError(format!("{name}: malformed response: {e}")))?;
        if resp.ok {
            Ok(resp.result)
        } else {
            Err(BackendError(resp.error.unwrap_or_else(|| format!("{name}: unspecified error"))))
        }
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(child) = self.child.get_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn image_fields(image: ImageView<'_>) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("image".into(), json!(image.path.display().to_string()));
    m.insert("width".into(), json!(image.image.width()));
    m.insert("height".into(), json!(image.image.height()));
    m
}

fn request(op: &str, image: Option<ImageView<'_>>, body: impl Serialize) -> Value {
    let mut m = image.map(image_fields).unwrap_or_default();
    m.insert("op".into(), json!(op));
    if let Value::Object(extra) = serde_json::to_value(body).expect("request serializes") {
        m.extend(extra);
    }
    Value::Object(m)
}

fn decode<T: serde::de::DeserializeOwned>(role: BackendRole, v: Value) -> Result<T, BackendError> {
    serde_json::from_value(v).map_err(|e| BackendError(format!("{}: bad result: {e}", role.as_str())))
}

fn decode_mask(role: BackendRole, rle: &RleMask, image: ImageView<'_>) -> Result<BinaryMask, BackendError> {
    let m = rle_decode(rle).map_err(|e| BackendError(format!("{}: {e}", role.as_str())))?;
    if (m.width() as u32, m.height() as u32) != image.image.dimensions() {
        return Err(BackendError(format!(
            "{}: mask is {}x{}, image is {}x{}",
            role.as_str(),
            m.width(),
            m.height(),
            image.image.width(),
            image.image.height()
        )));
    }
    Ok(m)
}

impl Captioner for ExternalBackend {
    fn caption(&self, image: ImageView<'_>, req: &CaptionRequest) -> Result<String, BackendError> {
        decode(self.role, self.call(request("caption", Some(image), req))?)
    }
}

impl PromptableSegmenter for ExternalBackend {
    fn segment(&self, image: ImageView<'_>, req: &SegmentRequest) -> Result<BinaryMask, BackendError> {
        let rle: RleMask = decode(self.role, self.call(request("segment", Some(image), req))?)?;
        decode_mask(self.role, &rle, image)
    }
}

impl PartSegmenter for ExternalBackend {
    fn segment_parts(&self, image: ImageView<'_>, req: &PartSegmentRequest) -> Result<Vec<PartProposal>, BackendError> {
        let parts: Vec<WirePart> = decode(self.role, self.call(request("part_segment", Some(image), req))?)?;
        parts
            .into_iter()
            .map(|p| {
                Ok(PartProposal {
                    mask: decode_mask(self.role, &p.mask, image)?,
                    part: p.part,
                    object: p.object,
                    bbox: p.bbox,
                })
            })
            .collect()
    }
}

impl Decomposer for ExternalBackend {
    fn decompose(&self, categories: &[String]) -> Result<BTreeMap<String, Vec<String>>, BackendError> {
        decode(self.role, self.call(request("decompose", None, json!({ "categories": categories })))?)
    }
}

impl Scorer for ExternalBackend {
    fn score(&self, image: ImageView<'_>, _crop: &RgbImage, req: &ScoreRequest) -> Result<f64, BackendError> {
        decode(self.role, self.call(request("score", Some(image), req))?)
    }
}

/// Serves one role of `suite` over the line protocol until `input` ends.
/// Images are read from the paths in the requests.
pub fn serve(
    suite: &BackendSuite,
    role: BackendRole,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<(), EngineError> {
    let io = |source| EngineError::Io {
        path: "<stdio>".into(),
        source,
    };
    for line in input.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match handle(suite, role, &line) {
            Ok(result) => json!({"ok": true, "result": result}),
            Err(e) => json!({"ok": false, "error": e.0}),
        };
        writeln!(output, "{resp}").map_err(io)?;
        output.flush().map_err(io)?;
    }
    Ok(())
}

fn parse<T: serde::de::DeserializeOwned>(op: &str, v: &Value) -> Result<T, BackendError> {
    serde_json::from_value(v.clone()).map_err(|e| BackendError(format!("bad `{op}` request: {e}")))
}

fn load_request_image(req: &Value) -> Result<(String, RgbImage), BackendError> {
    let path = req
        .get("image")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError("request has no image".into()))?;
    let img = image::open(path)
        .map_err(|e| BackendError(format!("cannot read {path}: {e}")))?
        .to_rgb8();
    Ok((path.to_string(), img))
}

fn handle(suite: &BackendSuite, role: BackendRole, line: &str) -> Result<Value, BackendError> {
    let req: Value = serde_json::from_str(line).map_err(|e| BackendError(format!("bad request: {e}")))?;
    let op = req.get("op").and_then(Value::as_str).unwrap_or("").to_string();
    let op = op.as_str();
    if role == BackendRole::Decomposer && op == "decompose" {
        let cats: Vec<String> = parse(op, req.get("categories").unwrap_or(&Value::Null))?;
        return Ok(serde_json::to_value(suite.decomposer.decompose(&cats)?).expect("table serializes"));
    }
    let expected = match role {
        BackendRole::Captioner => "caption",
        BackendRole::PromptableSegmenter => "segment",
        BackendRole::PartSegmenter => "part_segment",
        BackendRole::Scorer => "score",
        BackendRole::Decomposer => "decompose",
    };
    if op != expected {
        return Err(BackendError(format!("{} does not handle op `{op}`", role.as_str())));
    }
    let (path, img) = load_request_image(&req)?;
    let view = ImageView {
        image_ref: &path,
        path: Path::new(&path),
        image: &img,
    };
    Ok(match role {
        BackendRole::Captioner => json!(suite.captioner.caption(view, &parse(op, &req)?)?),
        BackendRole::PromptableSegmenter => {
            let m = suite.promptable_segmenter.segment(view, &parse(op, &req)?)?;
            serde_json::to_value(rle_encode(&m)).expect("rle serializes")
        }
        BackendRole::PartSegmenter => {
            let parts = suite.part_segmenter.segment_parts(view, &parse(op, &req)?)?;
            let wire: Vec<WirePart> = parts
                .into_iter()
                .map(|p| WirePart {
                    part: p.part,
                    object: p.object,
                    mask: rle_encode(&p.mask),
                    bbox: p.bbox,
                })
                .collect();
            serde_json::to_value(wire).expect("parts serialize")
        }
        BackendRole::Scorer => {
            let r: ScoreRequest = parse(op, &req)?;
            let region = super::pipeline::crop(&img, &r.bbox).ok_or_else(|| BackendError("empty crop".into()))?;
            json!(suite.scorer.score(view, &region, &r)?)
        }
        BackendRole::Decomposer => unreachable!("handled above"),
    })
}
