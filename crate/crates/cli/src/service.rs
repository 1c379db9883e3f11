//! JSON-over-HTTP service for interactive editing sessions.
//!
//! Images are stored content-addressed, so replaying a request with the
//! same parameters against the same checkpoint yields the same result id.
//! Latent optimizations run on a bounded job queue; re-rendering at a new
//! strength reuses cached codes and never optimizes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use spaceedit::editops::{ImagePair, TAG_VOCAB};
use spaceedit::generator::{GeneratorBundle, LatentInput, StyleCode};
use spaceedit::inversion::{
    average_codes, interpolate_codes, invert_batch, invert_identity, InversionConfig,
};
use spaceedit::lgie::{composite, zero_shot_edit, JointEmbedder, ZeroShotConfig, ZeroShotInit};
use spaceedit::spacesearch::{
    cluster_report, knn_query, spherical_kmeans_restarts, ClusterReport, CodeIndex, Neighbor,
    KMEANS_RESTARTS,
};
use spaceedit::{Image, Mask};
use tokio::sync::Semaphore;

use crate::config::RunConfig;

/// Upper end of the strength slider.
pub const MAX_ALPHA: f32 = 1.5;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<spaceedit::Error> for ApiError {
    fn from(e: spaceedit::Error) -> Self {
        match e {
            spaceedit::Error::InvalidArgument(_)
            | spaceedit::Error::ParamRange { .. }
            | spaceedit::Error::Shape(_) => Self::invalid(e.to_string()),
            _ => Self::internal(e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Bounded queue for latent optimizations: `workers` run at once and at
/// most `depth` more may wait; further submissions are rejected.
#[derive(Clone, Debug)]
pub struct JobQueue {
    admit: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

impl JobQueue {
    pub fn new(workers: usize, depth: usize) -> Self {
        Self {
            admit: Arc::new(Semaphore::new(workers + depth)),
            workers: Arc::new(Semaphore::new(workers)),
        }
    }

    pub async fn run<T, F>(&self, job: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let ticket = self
            .admit
            .clone()
            .try_acquire_owned()
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, "optimization queue is full"))?;
        let slot = self
            .workers
            .clone()
            .acquire_owned()
            .await
            .map_err(ApiError::internal)?;
        let out = tokio::task::spawn_blocking(move || {
            let out = job();
            drop(slot);
            drop(ticket);
            out
        })
        .await
        .map_err(ApiError::internal)?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditSpec {
    Text {
        request: String,
        lambda: Option<f64>,
    },
    Exemplar {
        exemplar_ids: Vec<String>,
    },
    Cluster {
        cluster: usize,
        exemplar_ids: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub spec: EditSpec,
    pub alpha: f32,
    pub mask_id: Option<String>,
    pub result_id: String,
    pub w: Vec<f32>,
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub id: String,
    pub image_id: String,
    /// The upload at model resolution.
    pub source_id: String,
    pub identity_id: String,
    pub identity_error: f64,
    pub w0: Vec<f32>,
    pub checkpoint_hash: String,
    pub seed: u64,
    /// Append-only.
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExemplarView {
    pub pair_id: String,
    pub before_id: String,
    pub after_id: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterView {
    pub cluster: usize,
    pub size: usize,
    pub tags: Vec<(String, usize)>,
    pub exemplars: Vec<ExemplarView>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClustersView {
    #[serde(rename = "K")]
    pub k: usize,
    pub purity: f64,
    pub clusters: Vec<ClusterView>,
}

pub struct AppState {
    bundle: GeneratorBundle,
    embedder: JointEmbedder,
    index: CodeIndex,
    pairs: HashMap<String, ImagePair>,
    checkpoint_hash: String,
    seed: u64,
    identity_inversion: InversionConfig,
    exemplar_inversion: InversionConfig,
    zero_shot: ZeroShotConfig,
    images: RwLock<HashMap<String, Bytes>>,
    image_dir: PathBuf,
    sessions: Mutex<HashMap<String, EditSession>>,
    session_dir: PathBuf,
    exemplar_codes: Mutex<HashMap<String, Vec<f32>>>,
    clusters: ClustersView,
    queue: JobQueue,
}

fn content_id(prefix: &str, parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    format!("{prefix}-{}", &hex::encode(h.finalize())[..16])
}

impl AppState {
    /// Loads persisted images and sessions from `session_dir` and clusters
    /// the index for the style browser.
    pub fn new(
        cfg: &RunConfig,
        bundle: GeneratorBundle,
        embedder: JointEmbedder,
        index: CodeIndex,
        pairs: Vec<ImagePair>,
        session_dir: PathBuf,
    ) -> anyhow::Result<Arc<Self>> {
        let image_dir = session_dir.join("images");
        fs::create_dir_all(&image_dir)
            .with_context(|| format!("creating {}", image_dir.display()))?;
        let checkpoint_hash = bundle.checkpoint_hash();
        let pairs: HashMap<String, ImagePair> =
            pairs.into_iter().map(|p| (p.id.clone(), p)).collect();
        if let Some(e) = index
            .entries
            .iter()
            .find(|e| !pairs.contains_key(&e.pair_id))
        {
            anyhow::bail!("index entry `{}` has no pair in the dataset", e.pair_id);
        }
        let state = AppState {
            bundle,
            embedder,
            index,
            pairs,
            checkpoint_hash,
            seed: cfg.seed,
            identity_inversion: InversionConfig {
                optimize_noise: false,
                ..cfg.inversion.clone()
            },
            exemplar_inversion: cfg.inversion.clone(),
            zero_shot: cfg.lgie.zero_shot.clone(),
            images: RwLock::new(HashMap::new()),
            image_dir,
            sessions: Mutex::new(HashMap::new()),
            session_dir,
            exemplar_codes: Mutex::new(HashMap::new()),
            clusters: ClustersView {
                k: 0,
                purity: 0.0,
                clusters: Vec::new(),
            },
            queue: JobQueue::new(cfg.serve.workers, cfg.serve.queue_depth),
        };
        state.restore()?;
        let clusters = state.build_clusters(cfg.serve.clusters)?;
        Ok(Arc::new(AppState { clusters, ..state }))
    }

    fn restore(&self) -> anyhow::Result<()> {
        for entry in fs::read_dir(&self.image_dir)? {
            let path = entry?.path();
            if let Some(id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .filter(|_| path.extension().is_some_and(|e| e == "png"))
            {
                let bytes =
                    fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                self.images
                    .write()
                    .expect("image store")
                    .insert(id.to_string(), Bytes::from(bytes));
            }
        }
        for entry in fs::read_dir(&self.session_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let s: EditSession = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
                if s.checkpoint_hash == self.checkpoint_hash {
                    self.sessions
                        .lock()
                        .expect("sessions")
                        .insert(s.id.clone(), s);
                }
            }
        }
        Ok(())
    }

    fn build_clusters(&self, k: usize) -> anyhow::Result<ClustersView> {
        let k = k.min(self.index.len());
        if k == 0 {
            return Ok(ClustersView {
                k: 0,
                purity: 0.0,
                clusters: Vec::new(),
            });
        }
        let c = spherical_kmeans_restarts(&self.index, k, self.seed, 100, KMEANS_RESTARTS)?;
        let report: ClusterReport = cluster_report(&self.index, &c, &TAG_VOCAB, 3, 4)?;
        let mut clusters = Vec::with_capacity(report.clusters.len());
        for s in report.clusters {
            let exemplars = s
                .exemplars
                .iter()
                .map(|id| {
                    let pair_id = &self.index.get(id).expect("exemplar is indexed").pair_id;
                    let p = &self.pairs[pair_id];
                    Ok(ExemplarView {
                        pair_id: pair_id.clone(),
                        before_id: self.put_image(p.before.to_png_bytes())?,
                        after_id: self.put_image(p.after.to_png_bytes())?,
                    })
                })
                .collect::<anyhow::Result<_>>()?;
            clusters.push(ClusterView {
                cluster: s.cluster,
                size: s.size,
                tags: s.tags,
                exemplars,
            });
        }
        Ok(ClustersView {
            k: report.k,
            purity: report.purity,
            clusters,
        })
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    /// Stores PNG bytes under their content id.
    pub fn put_image(&self, png: Vec<u8>) -> anyhow::Result<String> {
        let id = content_id("img", &[&png]);
        let mut store = self.images.write().expect("image store");
        if !store.contains_key(&id) {
            let path = self.image_dir.join(format!("{id}.png"));
            fs::write(&path, &png).with_context(|| format!("writing {}", path.display()))?;
            store.insert(id.clone(), Bytes::from(png));
        }
        Ok(id)
    }

    pub fn image_bytes(&self, id: &str) -> ApiResult<Bytes> {
        self.images
            .read()
            .expect("image store")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("image", id))
    }

    fn image(&self, id: &str) -> ApiResult<Image> {
        Ok(Image::from_png_bytes(&self.image_bytes(id)?)?)
    }

    fn mask(&self, id: &str) -> ApiResult<Mask> {
        let m = Mask::from_png_bytes(&self.image_bytes(id)?)?;
        let r = self.bundle.resolution();
        if m.width() != r || m.height() != r {
            return Err(ApiError::invalid(format!(
                "mask is {}x{}, expected {r}x{r}",
                m.width(),
                m.height()
            )));
        }
        Ok(m)
    }

    pub fn session(&self, id: &str) -> ApiResult<EditSession> {
        self.sessions
            .lock()
            .expect("sessions")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    fn save_session(&self, s: &EditSession) -> anyhow::Result<()> {
        let path = self.session_dir.join(format!("{}.json", s.id));
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(s)?)
            .with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn append_history(&self, id: &str, entry: HistoryEntry) -> ApiResult<()> {
        let mut sessions = self.sessions.lock().expect("sessions");
        let s = sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found("session", id))?;
        s.history.push(entry);
        self.save_session(s).map_err(ApiError::internal)
    }
}

/// Renders `image` under `(1 - alpha) * w0 + alpha * w`, keeping the
/// source outside `mask`.
pub fn render_edit(
    bundle: &GeneratorBundle,
    image: &Image,
    w0: &[f32],
    w: &[f32],
    alpha: f32,
    mask: Option<&Mask>,
) -> spaceedit::Result<Image> {
    let code = interpolate_codes(w0, w, alpha)?;
    let out = bundle.generate(image, &LatentInput::Style(StyleCode::new(code)))?;
    match mask {
        Some(m) => composite(&out, image, m),
        None => Ok(out),
    }
}

/// The `k` nearest indexed pairs to `pair_id`, excluding itself.
pub fn neighbors(index: &CodeIndex, pair_id: &str, k: usize) -> ApiResult<Vec<Neighbor>> {
    let entry = index
        .entries
        .iter()
        .find(|e| e.pair_id == pair_id)
        .ok_or_else(|| ApiError::not_found("pair", pair_id))?;
    if k == 0 || k >= index.len() {
        return Err(ApiError::invalid(format!(
            "k must be in 1..={}",
            index.len().saturating_sub(1)
        )));
    }
    let hits = knn_query(index, &entry.w_unit, k + 1)?;
    Ok(hits
        .into_iter()
        .filter(|n| n.id != entry.id)
        .take(k)
        .collect())
}

fn check_alpha(alpha: f32) -> ApiResult<()> {
    if !(0.0..=MAX_ALPHA).contains(&alpha) {
        return Err(ApiError::invalid(format!(
            "alpha must lie in [0, {MAX_ALPHA}]"
        )));
    }
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/images", post(upload_image))
        .route("/images/{id}", get(get_image))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edit-text", post(edit_text))
        .route("/sessions/{id}/edit-exemplar", post(edit_exemplar))
        .route("/interpolate", get(interpolate))
        .route("/clusters", get(clusters))
        .route("/retrieve", get(retrieve))
        .with_state(state)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_hash": st.checkpoint_hash }))
}

async fn upload_image(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let im = Image::from_png_bytes(&body)
        .map_err(|e| ApiError::invalid(format!("body is not a PNG image: {e}")))?;
    let id = st.put_image(body.to_vec()).map_err(ApiError::internal)?;
    Ok(Json(
        json!({ "image_id": id, "width": im.width(), "height": im.height() }),
    ))
}

async fn get_image(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = st.image_bytes(&id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub image_id: String,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Json(req): Json<SessionRequest>,
) -> ApiResult<Json<EditSession>> {
    let upload = st.image(&req.image_id)?;
    let id = content_id(
        "ses",
        &[
            st.checkpoint_hash.as_bytes(),
            req.image_id.as_bytes(),
            &st.seed.to_le_bytes(),
        ],
    );
    if let Ok(existing) = st.session(&id) {
        return Ok(Json(existing));
    }
    let r = st.bundle.resolution();
    let source = if upload.width() == r && upload.height() == r {
        upload
    } else {
        upload.resized(r, r)
    };
    let source_id = st
        .put_image(source.to_png_bytes())
        .map_err(ApiError::internal)?;
    let source = st.image(&source_id)?;
    let job_state = st.clone();
    let session = st
        .queue
        .run(move || -> ApiResult<EditSession> {
            let st = job_state;
            let inv = invert_identity(&st.bundle, &source, &st.identity_inversion)?;
            let w0 = inv.style.w;
            let recon = render_edit(&st.bundle, &source, &w0, &w0, 0.0, None)?;
            let identity_id = st
                .put_image(recon.to_png_bytes())
                .map_err(ApiError::internal)?;
            Ok(EditSession {
                id,
                image_id: req.image_id,
                source_id,
                identity_id,
                identity_error: inv.final_error,
                w0,
                checkpoint_hash: st.checkpoint_hash.clone(),
                seed: st.seed,
                history: Vec::new(),
            })
        })
        .await??;
    st.save_session(&session).map_err(ApiError::internal)?;
    st.sessions
        .lock()
        .expect("sessions")
        .entry(session.id.clone())
        .or_insert_with(|| session.clone());
    Ok(Json(session))
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<EditSession>> {
    Ok(Json(st.session(&id)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditTextRequest {
    pub request: String,
    pub lambda: Option<f64>,
    pub alpha: Option<f32>,
    pub mask_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EditResponse {
    pub session_id: String,
    pub result_id: String,
    pub alpha: f32,
    pub objective_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub exemplar_ids: Vec<String>,
}

async fn edit_text(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<EditTextRequest>,
) -> ApiResult<Json<EditResponse>> {
    let session = st.session(&id)?;
    let alpha = req.alpha.unwrap_or(1.0);
    check_alpha(alpha)?;
    if req.request.trim().is_empty() {
        return Err(ApiError::invalid("request text is empty"));
    }
    if let Some(l) = req.lambda {
        if !(l.is_finite() && l >= 0.0) {
            return Err(ApiError::invalid("lambda must be a nonnegative number"));
        }
    }
    let mask = req.mask_id.as_deref().map(|m| st.mask(m)).transpose()?;
    let source = st.image(&session.source_id)?;
    let job_state = st.clone();
    let request = req.request.clone();
    let (entry, lambda) = st
        .queue
        .run(move || -> ApiResult<(HistoryEntry, f64)> {
            let st = job_state;
            let mut cfg = ZeroShotConfig {
                init: ZeroShotInit::Code(session.w0.clone()),
                ..st.zero_shot.clone()
            };
            if let Some(l) = req.lambda {
                cfg.lambdas = vec![l];
            }
            let r = zero_shot_edit(
                &st.bundle,
                &st.embedder,
                &source,
                &request,
                mask.as_ref(),
                &cfg,
            )?;
            let c = r.chosen();
            let out = render_edit(&st.bundle, &source, &session.w0, &c.w, alpha, mask.as_ref())?;
            let result_id = st
                .put_image(out.to_png_bytes())
                .map_err(ApiError::internal)?;
            let entry = HistoryEntry {
                spec: EditSpec::Text {
                    request,
                    lambda: req.lambda,
                },
                alpha,
                mask_id: req.mask_id,
                result_id,
                w: c.w.clone(),
                objective_trace: c.trace.clone(),
            };
            Ok((entry, c.lambda))
        })
        .await??;
    let resp = EditResponse {
        session_id: id.clone(),
        result_id: entry.result_id.clone(),
        alpha,
        objective_trace: entry.objective_trace.clone(),
        lambda: Some(lambda),
        exemplar_ids: Vec::new(),
    };
    st.append_history(&id, entry)?;
    Ok(Json(resp))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditExemplarRequest {
    #[serde(default)]
    pub exemplar_ids: Vec<String>,
    /// Use the exemplars shown for this cluster instead.
    pub cluster: Option<usize>,
    pub alpha: Option<f32>,
}

async fn edit_exemplar(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<EditExemplarRequest>,
) -> ApiResult<Json<EditResponse>> {
    let session = st.session(&id)?;
    let alpha = req.alpha.unwrap_or(1.0);
    check_alpha(alpha)?;
    let (spec, ids) = match (req.cluster, req.exemplar_ids.is_empty()) {
        (Some(c), true) => {
            let view = st
                .clusters
                .clusters
                .iter()
                .find(|v| v.cluster == c)
                .ok_or_else(|| ApiError::not_found("cluster", &c.to_string()))?;
            let ids: Vec<String> = view.exemplars.iter().map(|e| e.pair_id.clone()).collect();
            (
                EditSpec::Cluster {
                    cluster: c,
                    exemplar_ids: ids.clone(),
                },
                ids,
            )
        }
        (None, false) => (
            EditSpec::Exemplar {
                exemplar_ids: req.exemplar_ids.clone(),
            },
            req.exemplar_ids.clone(),
        ),
        _ => return Err(ApiError::invalid("give either exemplar_ids or cluster")),
    };
    if let Some(bad) = ids.iter().find(|e| !st.pairs.contains_key(*e)) {
        return Err(ApiError::not_found("exemplar", bad));
    }
    let source = st.image(&session.source_id)?;
    let job_state = st.clone();
    let job_ids = ids.clone();
    let entry = st
        .queue
        .run(move || -> ApiResult<HistoryEntry> {
            let st = job_state;
            let missing: Vec<&ImagePair> = {
                let cache = st.exemplar_codes.lock().expect("exemplar cache");
                let mut seen = std::collections::BTreeSet::new();
                job_ids
                    .iter()
                    .filter(|e| !cache.contains_key(*e) && seen.insert(*e))
                    .map(|e| &st.pairs[e])
                    .collect()
            };
            if !missing.is_empty() {
                // each exemplar is inverted on its own so its code does not
                // depend on which other exemplars were requested with it
                let mut fresh = BTreeMap::new();
                for p in &missing {
                    let r = invert_batch(
                        &st.bundle,
                        &[&p.before],
                        &[&p.after],
                        &st.exemplar_inversion,
                    )?;
                    fresh.insert(p.id.clone(), r[0].style.w.clone());
                }
                st.exemplar_codes
                    .lock()
                    .expect("exemplar cache")
                    .extend(fresh);
            }
            let codes: Vec<Vec<f32>> = {
                let cache = st.exemplar_codes.lock().expect("exemplar cache");
                job_ids.iter().map(|e| cache[e].clone()).collect()
            };
            let w = average_codes(&codes)?;
            let out = render_edit(&st.bundle, &source, &session.w0, &w, alpha, None)?;
            let result_id = st
                .put_image(out.to_png_bytes())
                .map_err(ApiError::internal)?;
            Ok(HistoryEntry {
                spec,
                alpha,
                mask_id: None,
                result_id,
                w,
                objective_trace: Vec::new(),
            })
        })
        .await??;
    let resp = EditResponse {
        session_id: id.clone(),
        result_id: entry.result_id.clone(),
        alpha,
        objective_trace: Vec::new(),
        lambda: None,
        exemplar_ids: ids,
    };
    st.append_history(&id, entry)?;
    Ok(Json(resp))
}

#[derive(Debug, Deserialize)]
pub struct InterpolateQuery {
    pub session: String,
    pub result: String,
    pub alpha: f32,
}

async fn interpolate(
    State(st): State<Arc<AppState>>,
    Query(q): Query<InterpolateQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let session = st.session(&q.session)?;
    check_alpha(q.alpha)?;
    let entry = session
        .history
        .iter()
        .find(|h| h.result_id == q.result)
        .cloned()
        .ok_or_else(|| ApiError::not_found("result", &q.result))?;
    let mask = entry.mask_id.as_deref().map(|m| st.mask(m)).transpose()?;
    let source = st.image(&session.source_id)?;
    let job_state = st.clone();
    let alpha = q.alpha;
    let image_id = tokio::task::spawn_blocking(move || -> ApiResult<String> {
        let out = render_edit(
            &job_state.bundle,
            &source,
            &session.w0,
            &entry.w,
            alpha,
            mask.as_ref(),
        )?;
        job_state
            .put_image(out.to_png_bytes())
            .map_err(ApiError::internal)
    })
    .await
    .map_err(ApiError::internal)??;
    Ok(Json(json!({ "image_id": image_id, "alpha": alpha })))
}

async fn clusters(State(st): State<Arc<AppState>>) -> Json<ClustersView> {
    Json(st.clusters.clone())
}

#[derive(Debug, Deserialize)]
pub struct RetrieveQuery {
    pub pair_id: String,
    pub k: Option<usize>,
}

async fn retrieve(
    State(st): State<Arc<AppState>>,
    Query(q): Query<RetrieveQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let hits = neighbors(&st.index, &q.pair_id, q.k.unwrap_or(5))?;
    Ok(Json(json!({ "pair_id": q.pair_id, "neighbors": hits })))
}

/// Serves until interrupted.
pub fn run(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
