//! Rate-distortion evaluation: quality metrics, BD-rate, the end-to-end
//! encode/decode pipeline with bit accounting, and RD sweeps with CSV tables
//! and SVG plots.

use crate::bitstream::{demux, encode_keyframe, mux, KeyframeCodec, StreamHeader, HEADER_LEN};
use crate::error::{Error, Result};
use crate::factorizer::CompactMotionVector;
use crate::feature_codec::{code_sequence, decode_sequence, CodecConfig};
use crate::model::Model;
use crate::video::{arr_to_frame, Fps, Video};
use serde::Serialize;
use std::path::Path;

// ---- quality metrics -----------------------------------------------------------

/// Per-frame PSNR in dB averaged over frames; pixels are `[0, 1]` so the
/// peak is 1. Identical frames yield the `f64::INFINITY` sentinel.
pub fn psnr(a: &Video, b: &Video) -> Result<f64> {
    if a.frame_count() != b.frame_count() || a.resolution() != b.resolution() {
        return Err(Error::input("psnr: video shape mismatch"));
    }
    let mut acc = 0.0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        let mut mse = 0.0;
        for (x, y) in fa.pixels.iter().zip(fb.pixels.iter()) {
            mse += (x - y) * (x - y);
        }
        mse /= fa.pixels.len() as f64;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        acc += 10.0 * (1.0 / mse).log10();
    }
    Ok(acc / a.frame_count() as f64)
}

/// Quality metric, builtin or via an external command printing one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Psnr,
    Dists,
    Lpips,
    Fvd,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(MetricKind::Psnr),
            "dists" => Ok(MetricKind::Dists),
            "lpips" => Ok(MetricKind::Lpips),
            "fvd" => Ok(MetricKind::Fvd),
            other => Err(Error::config(format!("unknown metric {other}"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            MetricKind::Psnr => "psnr",
            MetricKind::Dists => "dists",
            MetricKind::Lpips => "lpips",
            MetricKind::Fvd => "fvd",
        }
    }

    /// Raw-score orientation: lower is better for all perceptual metrics.
    pub fn higher_better(&self) -> bool {
        matches!(self, MetricKind::Psnr)
    }

    /// RD-plot y-axis label under the increasing-is-better convention.
    pub fn display_label(&self) -> &'static str {
        match self {
            MetricKind::Psnr => "PSNR",
            MetricKind::Dists => "1-DISTS",
            MetricKind::Lpips => "1-LPIPS",
            MetricKind::Fvd => "5000-FVD",
        }
    }

    /// Transforms a raw score onto the display axis.
    pub fn display_value(&self, raw: f64) -> f64 {
        match self {
            MetricKind::Psnr => raw,
            MetricKind::Dists | MetricKind::Lpips => 1.0 - raw,
            MetricKind::Fvd => 5000.0 - raw,
        }
    }
}

/// Metric adapter: PSNR is builtin, everything else runs an external command
/// template with `{reference}` and `{distorted}` placeholders pointing at raw
/// video files; the command must print the raw score to stdout.
pub struct MetricAdapter {
    pub kind: MetricKind,
    pub command: Option<String>,
}

impl MetricAdapter {
    pub fn builtin_psnr() -> Self {
        MetricAdapter {
            kind: MetricKind::Psnr,
            command: None,
        }
    }

    pub fn measure(&self, reference: &Video, distorted: &Video) -> Result<f64> {
        match (&self.kind, &self.command) {
            (MetricKind::Psnr, None) => psnr(reference, distorted),
            (kind, Some(template)) => {
                let tmp = std::env::temp_dir();
                let tag = format!("mttf-metric-{}-{}", std::process::id(), kind.id());
                let ref_path = tmp.join(format!("{tag}-ref.rgb"));
                let dist_path = tmp.join(format!("{tag}-dist.rgb"));
                reference.save_raw(&ref_path)?;
                distorted.save_raw(&dist_path)?;
                let cmd = template
                    .replace("{reference}", &ref_path.display().to_string())
                    .replace("{distorted}", &dist_path.display().to_string());
                let out = std::process::Command::new("sh")
                    .arg("-c")
                    .arg(&cmd)
                    .output()
                    .map_err(|e| Error::Eval(format!("metric command failed to start: {e}")))?;
                if !out.status.success() {
                    return Err(Error::Eval(format!(
                        "metric command `{cmd}` exited with {}: {}",
                        out.status,
                        String::from_utf8_lossy(&out.stderr)
                    )));
                }
                let text = String::from_utf8_lossy(&out.stdout);
                text.split_whitespace()
                    .last()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Eval(format!("metric printed no score: {text:?}")))
            }
            (kind, None) => Err(Error::Eval(format!(
                "metric {} needs an external command",
                kind.id()
            ))),
        }
    }
}

// ---- BD-rate ----------------------------------------------------------------------

/// One operating point: rate in kbit/s and quality on the increasing-better
/// display axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RDPoint {
    pub rate_kbps: f64,
    pub quality: f64,
}

fn validate_curve(points: &[RDPoint]) -> Result<()> {
    if points.len() < 4 {
        return Err(Error::Eval(format!(
            "BD-rate needs at least 4 points per curve, got {}",
            points.len()
        )));
    }
    for w in points.windows(2) {
        if !(w[1].rate_kbps > w[0].rate_kbps) {
            return Err(Error::Eval("curve rates must be strictly increasing".into()));
        }
        if !(w[1].quality > w[0].quality) {
            return Err(Error::Eval(
                "curve quality must be strictly increasing with rate".into(),
            ));
        }
    }
    if points.iter().any(|p| !(p.rate_kbps > 0.0) || !p.quality.is_finite()) {
        return Err(Error::Eval("curve points must have positive rate and finite quality".into()));
    }
    Ok(())
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson derivative
/// rule) with analytic integration.
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::Eval("pchip needs two or more matched points".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Eval("pchip abscissae must be strictly increasing".into()));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
        let mut ds = vec![0.0; n];
        for k in 1..n - 1 {
            if m[k - 1] * m[k] <= 0.0 {
                ds[k] = 0.0;
            } else {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                ds[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
            }
        }
        ds[0] = edge_derivative(h[0], h.get(1).copied().unwrap_or(h[0]), m[0], m.get(1).copied().unwrap_or(m[0]));
        ds[n - 1] = edge_derivative(
            h[n - 2],
            if n >= 3 { h[n - 3] } else { h[n - 2] },
            m[n - 2],
            if n >= 3 { m[n - 3] } else { m[n - 2] },
        );
        Ok(Pchip { xs, ys, ds })
    }

    fn segment(&self, x: f64) -> usize {
        match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(self.xs.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.xs.len() - 2),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[k] + h10 * h * self.ds[k] + h01 * self.ys[k + 1] + h11 * h * self.ds[k + 1]
    }

    /// Exact integral over `[a, b]` (inside the knot span).
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        assert!(b >= a);
        let mut total = 0.0;
        for k in 0..self.xs.len() - 1 {
            let lo = self.xs[k].max(a);
            let hi = self.xs[k + 1].min(b);
            if hi <= lo {
                continue;
            }
            let h = self.xs[k + 1] - self.xs[k];
            let ta = (lo - self.xs[k]) / h;
            let tb = (hi - self.xs[k]) / h;
            // Antiderivatives of the Hermite basis polynomials.
            let prim = |t: f64| {
                let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
                (
                    t4 / 2.0 - t3 + t,
                    t4 / 4.0 - 2.0 * t3 / 3.0 + t2 / 2.0,
                    -t4 / 2.0 + t3,
                    t4 / 4.0 - t3 / 3.0,
                )
            };
            let (a00, a10, a01, a11) = prim(ta);
            let (b00, b10, b01, b11) = prim(tb);
            total += h
                * (self.ys[k] * (b00 - a00)
                    + h * self.ds[k] * (b10 - a10)
                    + self.ys[k + 1] * (b01 - a01)
                    + h * self.ds[k + 1] * (b11 - a11));
        }
        total
    }
}

fn edge_derivative(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d * m0 <= 0.0 {
        0.0
    } else if m0 * m1 <= 0.0 && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// BD-rate interpolation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdMethod {
    /// Monotone piecewise-cubic Hermite on (quality, log10 rate); default.
    Pchip,
    /// Classic least-squares cubic polynomial fit.
    CubicFit,
}

/// Average bit-rate difference of `test` against `anchor` over their
/// overlapping quality range, in percent; negative means bit savings.
pub fn bd_rate(anchor: &[RDPoint], test: &[RDPoint], method: BdMethod) -> Result<f64> {
    validate_curve(anchor)?;
    validate_curve(test)?;
    let lo = anchor[0].quality.max(test[0].quality);
    let hi = anchor[anchor.len() - 1]
        .quality
        .min(test[test.len() - 1].quality);
    if !(hi > lo) {
        return Err(Error::Eval("BD-rate: no overlapping quality range".into()));
    }
    let integral = |points: &[RDPoint]| -> Result<f64> {
        let xs: Vec<f64> = points.iter().map(|p| p.quality).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.rate_kbps.log10()).collect();
        match method {
            BdMethod::Pchip => Ok(Pchip::new(xs, ys)?.integrate(lo, hi)),
            BdMethod::CubicFit => {
                let c = cubic_fit(&xs, &ys)?;
                Ok(cubic_integral(&c, lo, hi))
            }
        }
    };
    let avg_diff = (integral(test)? - integral(anchor)?) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Least-squares cubic coefficients `c0 + c1 x + c2 x^2 + c3 x^3`.
fn cubic_fit(xs: &[f64], ys: &[f64]) -> Result<[f64; 4]> {
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (&x, &y) in xs.iter().zip(ys) {
        let row = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    // Gaussian elimination with partial pivoting.
    let mut aug = [[0.0f64; 5]; 4];
    for i in 0..4 {
        aug[i][..4].copy_from_slice(&ata[i]);
        aug[i][4] = atb[i];
    }
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
            .unwrap();
        if aug[pivot][col].abs() < 1e-12 {
            return Err(Error::Eval("cubic fit is singular".into()));
        }
        aug.swap(col, pivot);
        for row in 0..4 {
            if row == col {
                continue;
            }
            let f = aug[row][col] / aug[col][col];
            for k in col..5 {
                aug[row][k] -= f * aug[col][k];
            }
        }
    }
    let mut c = [0.0; 4];
    for i in 0..4 {
        c[i] = aug[i][4] / aug[i][i];
    }
    Ok(c)
}

fn cubic_integral(c: &[f64; 4], a: f64, b: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x * x * x / 3.0 + c[3] * x * x * x * x / 4.0;
    prim(b) - prim(a)
}

// ---- end-to-end pipeline ----------------------------------------------------------

/// Exact bit-rate identity used in every report:
/// `8 * bytes * fps / frames / 1000`.
pub fn kbps(bytes: usize, fps: Fps, frames: usize) -> f64 {
    8.0 * bytes as f64 * fps.as_f64() / frames as f64 / 1000.0
}

/// Bit accounting and per-frame symbol statistics of one coded stream.
#[derive(Debug, Clone, Serialize)]
pub struct StreamStats {
    pub frame_count: usize,
    pub resolution: usize,
    pub fps_num: u16,
    pub fps_den: u16,
    pub quantization_step: f64,
    pub header_bits: usize,
    pub keyframe_bits: usize,
    pub feature_bits: usize,
    pub total_bits: usize,
    pub keyframe_kbps: f64,
    pub feature_kbps: f64,
    pub total_kbps: f64,
    pub symbols_per_frame: usize,
    /// Nonzero residual symbols in each inter frame.
    pub per_frame_nonzero_symbols: Vec<usize>,
}

fn build_stats(
    header: &StreamHeader,
    residual_nonzeros: Vec<usize>,
    channels: usize,
) -> StreamStats {
    let frames = header.frame_count as usize;
    let header_bits = HEADER_LEN * 8;
    let keyframe_bits = header.keyframe_len as usize * 8;
    let feature_bits = header.feature_len as usize * 8;
    let total_bytes = HEADER_LEN + header.keyframe_len as usize + header.feature_len as usize;
    StreamStats {
        frame_count: frames,
        resolution: header.resolution(),
        fps_num: header.fps.num,
        fps_den: header.fps.den,
        quantization_step: header.step(),
        header_bits,
        keyframe_bits,
        feature_bits,
        total_bits: header_bits + keyframe_bits + feature_bits,
        keyframe_kbps: kbps(header.keyframe_len as usize, header.fps, frames),
        feature_kbps: kbps(header.feature_len as usize, header.fps, frames),
        total_kbps: kbps(total_bytes, header.fps, frames),
        symbols_per_frame: 2 * channels,
        per_frame_nonzero_symbols: residual_nonzeros,
    }
}

/// Encodes a video into an `.mttf` stream: conventional key frame plus
/// entropy-coded compact motion vectors for every inter frame.
pub fn encode(
    video: &Video,
    model: &Model,
    codec: &dyn KeyframeCodec,
    qp: u8,
    step_num: u16,
    step_den: u16,
) -> Result<(Vec<u8>, StreamStats)> {
    if video.frame_count() > u16::MAX as usize {
        return Err(Error::input("sequence too long for the container"));
    }
    if step_num == 0 || step_den == 0 {
        return Err(Error::config("quantization step must be a positive rational"));
    }
    let resolution_index = video.frames[0]
        .resolution_index(model.cfg.largest_resolution, model.cfg.resolution_count)?;
    let step = step_num as f64 / step_den as f64;
    let codec_cfg = CodecConfig::new(step, model.cfg.channels)?;

    let (keyframe_payload, key_recon) = encode_keyframe(&video.frames[0], qp, codec)?;
    // Everything downstream sees only the reconstruction.
    let key_state = model.analyze_key(&key_recon)?;
    let vectors: Vec<CompactMotionVector> = video.frames[1..]
        .iter()
        .map(|f| model.predict_frame_vector(f))
        .collect::<Result<_>>()?;
    let coded = code_sequence(&vectors, &key_state.vector, &codec_cfg)?;

    let header = StreamHeader {
        version: crate::bitstream::VERSION,
        largest_resolution: model.cfg.largest_resolution as u16,
        resolution_index: resolution_index as u8,
        channels: model.cfg.channels as u8,
        depth: model.cfg.depth as u8,
        resolution_count: model.cfg.resolution_count as u8,
        frame_count: video.frame_count() as u16,
        fps: video.fps,
        step_num,
        step_den,
        keyframe_codec_id: codec.id(),
        keyframe_len: keyframe_payload.len() as u32,
        feature_len: coded.payload.len() as u32,
    };
    let stream = mux(&header, &keyframe_payload, &coded.payload)?;

    let nonzeros = count_nonzeros(&vectors, &key_state.vector, step);
    Ok((stream, build_stats(&header, nonzeros, model.cfg.channels)))
}

fn count_nonzeros(vectors: &[CompactMotionVector], key: &CompactMotionVector, step: f64) -> Vec<usize> {
    let mut reference = key.clone();
    let mut out = Vec::with_capacity(vectors.len());
    for v in vectors {
        let residual = crate::feature_codec::predict_and_quantize(v, &reference, step)
            .expect("validated step");
        out.push(residual.symbols.iter().filter(|&&s| s != 0).count());
        reference = crate::feature_codec::reconstruct(&reference, &residual, step)
            .expect("validated lengths");
    }
    out
}

/// Decodes an `.mttf` stream back into a video plus its stats report.
pub fn decode(
    stream: &[u8],
    model: &Model,
    codec: &dyn KeyframeCodec,
) -> Result<(Video, StreamStats)> {
    let (header, keyframe_payload, feature_payload) = demux(stream)?;
    if header.channels as usize != model.cfg.channels
        || header.largest_resolution as usize != model.cfg.largest_resolution
        || header.depth as usize != model.cfg.depth
        || header.resolution_count as usize != model.cfg.resolution_count
    {
        return Err(Error::Decode(format!(
            "stream was coded for a different model: {}ch r{} d{} n{}",
            header.channels, header.largest_resolution, header.depth, header.resolution_count
        )));
    }
    if header.keyframe_codec_id != codec.id() {
        return Err(Error::Decode(format!(
            "stream needs key-frame codec id {}, adapter provides {}",
            header.keyframe_codec_id,
            codec.id()
        )));
    }
    let key_recon = codec.decode(&keyframe_payload)?;
    if key_recon.resolution() != header.resolution() {
        return Err(Error::Decode(format!(
            "key frame decoded at {}px, header says {}px",
            key_recon.resolution(),
            header.resolution()
        )));
    }
    let key_state = model.analyze_key(&key_recon)?;
    let inter_count = header.frame_count as usize - 1;
    let step = header.step();
    let codec_cfg = CodecConfig::new(step, model.cfg.channels)?;
    let vectors = decode_sequence(&feature_payload, inter_count, &key_state.vector, &codec_cfg)?;

    let mut frames = Vec::with_capacity(header.frame_count as usize);
    frames.push(key_recon.clone());
    let mut nonzeros = Vec::with_capacity(inter_count);
    let mut reference = key_state.vector.clone();
    for v in &vectors {
        let out = model.synthesize(&key_state, v, header.resolution_index as usize)?;
        frames.push(arr_to_frame(&out.fused));
        let residual = crate::feature_codec::predict_and_quantize(v, &reference, step)?;
        nonzeros.push(residual.symbols.iter().filter(|&&s| s != 0).count());
        reference = v.clone();
    }
    let video = Video::new(frames, header.fps)?;
    Ok((video, build_stats(&header, nonzeros, model.cfg.channels)))
}

// ---- RD sweep -------------------------------------------------------------------------

/// One operating point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub sequence: String,
    pub qp: u8,
    pub step_num: u16,
    pub step_den: u16,
    pub rate_kbps: f64,
    /// Display-axis value per metric; `None` marks a missing adapter/score.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
pub struct SweepResult {
    pub metric_labels: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Runs the full codec over every (sequence, qp, step) combination, measures
/// every metric, writes `rd_table.csv` and one SVG plot per metric into
/// `out_dir`. A failing metric adapter marks its cell missing; the sweep
/// continues. Output files are written atomically.
pub fn rd_sweep(
    sequences: &[(String, Video)],
    model: &Model,
    codec: &dyn KeyframeCodec,
    qps: &[u8],
    steps: &[(u16, u16)],
    metrics: &[MetricAdapter],
    out_dir: &Path,
) -> Result<SweepResult> {
    if sequences.is_empty() {
        return Err(Error::Eval("rd_sweep: empty sequence list".into()));
    }
    if qps.len() * steps.len() < 2 {
        return Err(Error::Eval("rd_sweep: need at least two operating points".into()));
    }
    if metrics.is_empty() {
        return Err(Error::Eval("rd_sweep: no metrics requested".into()));
    }
    let mut rows = Vec::new();
    for (name, video) in sequences {
        for &qp in qps {
            for &(num, den) in steps {
                let (stream, stats) = encode(video, model, codec, qp, num, den)?;
                let (recon, _) = decode(&stream, model, codec)?;
                let scores = metrics
                    .iter()
                    .map(|m| match m.measure(video, &recon) {
                        Ok(raw) => Some(m.kind.display_value(raw)),
                        Err(_) => None,
                    })
                    .collect();
                rows.push(SweepRow {
                    sequence: name.clone(),
                    qp,
                    step_num: num,
                    step_den: den,
                    rate_kbps: stats.total_kbps,
                    scores,
                });
            }
        }
    }
    let result = SweepResult {
        metric_labels: metrics.iter().map(|m| m.kind.display_label().to_string()).collect(),
        rows,
    };
    std::fs::create_dir_all(out_dir)?;
    write_sweep_csv(&result, &out_dir.join("rd_table.csv"))?;
    for (mi, label) in result.metric_labels.iter().enumerate() {
        let path = out_dir.join(format!("rd_{}.svg", metrics[mi].kind.id()));
        write_rd_plot(&result, mi, label, &path)?;
    }
    Ok(result)
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut out = String::from("sequence,qp,delta,rate_kbps");
    for label in &result.metric_labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for row in &result.rows {
        out.push_str(&format!(
            "{},{},{}/{},{:.6}",
            row.sequence, row.qp, row.step_num, row.step_den, row.rate_kbps
        ));
        for s in &row.scores {
            out.push(',');
            if let Some(v) = s {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    atomic_write(path, &out)
}

/// Minimal static SVG: one polyline per sequence, rate on x, display-axis
/// quality on y.
fn write_rd_plot(result: &SweepResult, metric: usize, label: &str, path: &Path) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let mut series: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for row in &result.rows {
        if let Some(score) = row.scores[metric] {
            series.entry(row.sequence.clone()).or_default().push((row.rate_kbps, score));
        }
    }
    let points: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    if points.is_empty() {
        return atomic_write(path, "<svg xmlns=\"http://www.w3.org/2000/svg\"/>\n");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |lo: &mut f64, hi: &mut f64| {
        if *hi - *lo < 1e-9 {
            *lo -= 0.5;
            *hi += 0.5;
        }
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{}\" x2=\"{M}\" y2=\"{M}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">Bit-rate (kbps)</text>\n\
         <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\" font-size=\"14\">{label}</text>\n",
        H - M,
        W - M,
        H - M,
        H - M,
        W / 2.0,
        H - 16.0,
        H / 2.0,
        H / 2.0,
    );
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (si, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let color = palette[si % palette.len()];
        let path_d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_d.join(" ")
        ));
        for &(x, y) in pts.iter() {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - M + 4.0,
            M + 14.0 * si as f64,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{}\" font-size=\"11\">{x0:.2}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{x1:.2}</text>\n\
         <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{y0:.2}</text>\n\
         <text x=\"{}\" y=\"{M}\" font-size=\"11\" text-anchor=\"end\">{y1:.2}</text>\n</svg>\n",
        H - M + 16.0,
        W - M,
        H - M + 16.0,
        M - 4.0,
        H - M,
        M - 4.0,
    ));
    atomic_write(path, &svg)
}

/// Reads a two-column `rate_kbps,quality` CSV (optional header) into a curve.
pub fn read_rd_csv(path: &Path) -> Result<Vec<RDPoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(Error::Eval(format!("{}:{}: need rate,quality", path.display(), i + 1)));
        }
        match (cols[0].parse::<f64>(), cols[1].parse::<f64>()) {
            (Ok(rate_kbps), Ok(quality)) => points.push(RDPoint { rate_kbps, quality }),
            _ if i == 0 => continue, // header line
            _ => {
                return Err(Error::Eval(format!(
                    "{}:{}: bad numbers {line:?}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::LosslessCodec;
    use crate::model::{Model, ModelConfig};
    use crate::video::synthetic_disc_clip;

    fn sample_curve() -> Vec<RDPoint> {
        vec![
            RDPoint { rate_kbps: 20.0, quality: 0.60 },
            RDPoint { rate_kbps: 35.0, quality: 0.68 },
            RDPoint { rate_kbps: 60.0, quality: 0.76 },
            RDPoint { rate_kbps: 110.0, quality: 0.84 },
        ]
    }

    #[test]
    fn psnr_known_values() {
        let a = synthetic_disc_clip(16, 3, 0.5, Fps::new(25, 1));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // Uniform +0.1 difference: MSE = 0.01, PSNR = 20 dB.
        let mut b = a.clone();
        for f in &mut b.frames {
            f.pixels.mapv_inplace(|v| (v * 0.0) + 0.4);
        }
        let mut c = b.clone();
        for f in &mut c.frames {
            f.pixels.mapv_inplace(|v| v + 0.1);
        }
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
        // Loop oracle on clips with no identical frame pair.
        let frame = |p| crate::video::synthetic_disc_frame(8, p);
        let x = Video::new(vec![frame(0.1), frame(0.4)], Fps::new(25, 1)).unwrap();
        let y = Video::new(vec![frame(0.9), frame(1.6)], Fps::new(25, 1)).unwrap();
        let mut acc = 0.0;
        for (fa, fb) in x.frames.iter().zip(&y.frames) {
            let mut mse = 0.0;
            let mut n = 0.0;
            for (p, q) in fa.pixels.iter().zip(fb.pixels.iter()) {
                mse += (p - q) * (p - q);
                n += 1.0;
            }
            acc += 10.0 * (n / mse).log10();
        }
        acc /= 2.0;
        assert!((psnr(&x, &y).unwrap() - acc).abs() < 1e-6);
    }

    #[test]
    fn bd_rate_identity_and_scaling() {
        let anchor = sample_curve();
        assert!(bd_rate(&anchor, &anchor, BdMethod::Pchip).unwrap().abs() < 1e-9);
        let doubled: Vec<RDPoint> = anchor
            .iter()
            .map(|p| RDPoint {
                rate_kbps: p.rate_kbps * 2.0,
                quality: p.quality,
            })
            .collect();
        let bd = bd_rate(&anchor, &doubled, BdMethod::Pchip).unwrap();
        assert!((bd - 100.0).abs() < 1e-9, "2x rate must be exactly +100%, got {bd}");
        let bd = bd_rate(&doubled, &anchor, BdMethod::Pchip).unwrap();
        assert!((bd + 50.0).abs() < 1e-9, "half rate is -50%, got {bd}");
        // Cubic-fit variant agrees on these exact cases.
        let bd = bd_rate(&anchor, &doubled, BdMethod::CubicFit).unwrap();
        assert!((bd - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bd_rate_error_paths() {
        let anchor = sample_curve();
        assert!(matches!(
            bd_rate(&anchor[..3], &anchor, BdMethod::Pchip),
            Err(Error::Eval(_))
        ));
        let disjoint: Vec<RDPoint> = anchor
            .iter()
            .map(|p| RDPoint {
                rate_kbps: p.rate_kbps,
                quality: p.quality + 10.0,
            })
            .collect();
        assert!(matches!(
            bd_rate(&anchor, &disjoint, BdMethod::Pchip),
            Err(Error::Eval(_))
        ));
        let mut unsorted = anchor.clone();
        unsorted.swap(0, 1);
        assert!(bd_rate(&unsorted, &anchor, BdMethod::Pchip).is_err());
    }

    #[test]
    fn pchip_interpolates_and_preserves_monotonicity() {
        let xs = vec![0.0, 1.0, 2.0, 3.5];
        let ys = vec![0.0, 0.5, 0.6, 2.0];
        let p = Pchip::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((p.eval(*x) - y).abs() < 1e-12);
        }
        let mut last = f64::MIN;
        for i in 0..=200 {
            let x = 3.5 * i as f64 / 200.0;
            let v = p.eval(x);
            assert!(v >= last - 1e-9, "monotone data must interpolate monotonically");
            last = v;
        }
        // Analytic integral matches dense trapezoid integration.
        let analytic = p.integrate(0.2, 3.1);
        let n = 200_000;
        let mut grid = 0.0;
        for i in 0..n {
            let a = 0.2 + (3.1 - 0.2) * i as f64 / n as f64;
            let b = 0.2 + (3.1 - 0.2) * (i + 1) as f64 / n as f64;
            grid += (p.eval(a) + p.eval(b)) / 2.0 * (b - a);
        }
        assert!((analytic - grid).abs() < 1e-8, "{analytic} vs {grid}");
    }

    #[test]
    fn kbps_accounting_identity() {
        // 10,500 bytes at 25 fps over 125 frames -> 16.8 kbps.
        assert!((kbps(10_500, Fps::new(25, 1), 125) - 16.8).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_toy_pipeline() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let codec = LosslessCodec;
        let video = synthetic_disc_clip(64, 9, 0.6, Fps::new(25, 1));
        let (stream, stats) = encode(&video, &model, &codec, 32, 1, 50).unwrap();
        assert_eq!(stats.frame_count, 9);
        assert_eq!(
            stats.total_bits,
            stats.header_bits + stats.keyframe_bits + stats.feature_bits
        );
        assert_eq!(stats.total_bits, stream.len() * 8);
        let expect_kbps = kbps(stream.len(), video.fps, 9);
        assert!((stats.total_kbps - expect_kbps).abs() < 1e-12);

        let (recon, dstats) = decode(&stream, &model, &codec).unwrap();
        assert_eq!(recon.frame_count(), 9);
        assert_eq!(recon.resolution(), 64);
        assert_eq!(recon.fps, video.fps);
        assert_eq!(dstats.total_bits, stats.total_bits);
        assert_eq!(dstats.per_frame_nonzero_symbols, stats.per_frame_nonzero_symbols);

        // Decoding twice gives bit-identical videos.
        let (recon2, _) = decode(&stream, &model, &codec).unwrap();
        for (a, b) in recon.frames.iter().zip(&recon2.frames) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn decode_rejects_mismatched_model() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let mut other_cfg = ModelConfig::toy();
        other_cfg.channels = 6;
        other_cfg.foreground_components = 10;
        other_cfg.background_components = 2;
        let other = Model::new(other_cfg).unwrap();
        let codec = LosslessCodec;
        let video = synthetic_disc_clip(64, 3, 0.6, Fps::new(25, 1));
        let (stream, _) = encode(&video, &model, &codec, 32, 1, 50).unwrap();
        assert!(matches!(decode(&stream, &other, &codec), Err(Error::Decode(_))));
    }

    #[test]
    fn pipeline_consumes_only_the_keyframe_reconstruction() {
        use crate::bitstream::KeyframeCodec;
        use std::sync::atomic::{AtomicUsize, Ordering};

        // Adapter that decodes to a fixed frame regardless of the payload:
        // if the encoder consulted original key-frame pixels anywhere after
        // encode_keyframe, the feature payloads below would differ.
        struct FixedReconCodec {
            recon: crate::video::FrameImage,
            decode_calls: AtomicUsize,
        }
        impl KeyframeCodec for FixedReconCodec {
            fn id(&self) -> u8 {
                0
            }
            fn encode(&self, frame: &crate::video::FrameImage, _qp: u8) -> crate::error::Result<Vec<u8>> {
                Ok(crate::bitstream::serialize_frame(frame))
            }
            fn decode(&self, _payload: &[u8]) -> crate::error::Result<crate::video::FrameImage> {
                self.decode_calls.fetch_add(1, Ordering::Relaxed);
                Ok(self.recon.clone())
            }
        }

        let model = Model::new(ModelConfig::toy()).unwrap();
        let inter: Vec<_> = (1..4)
            .map(|t| crate::video::synthetic_disc_frame(64, 0.3 + t as f64 * 0.5))
            .collect();
        let make_video = |key: crate::video::FrameImage| {
            let mut frames = vec![key];
            frames.extend(inter.iter().cloned());
            Video::new(frames, Fps::new(25, 1)).unwrap()
        };
        let codec = FixedReconCodec {
            recon: crate::video::synthetic_disc_frame(64, 2.2),
            decode_calls: AtomicUsize::new(0),
        };
        let video_a = make_video(crate::video::synthetic_disc_frame(64, 0.0));
        let video_b = make_video(crate::video::synthetic_disc_frame(64, 1.0));
        let (stream_a, _) = encode(&video_a, &model, &codec, 32, 1, 50).unwrap();
        assert!(codec.decode_calls.load(Ordering::Relaxed) >= 1);
        let (stream_b, _) = encode(&video_b, &model, &codec, 32, 1, 50).unwrap();
        let (_, _, features_a) = crate::bitstream::demux(&stream_a).unwrap();
        let (_, _, features_b) = crate::bitstream::demux(&stream_b).unwrap();
        assert_eq!(
            features_a, features_b,
            "feature stream must depend on the reconstruction only, never the original key frame"
        );
        // And the decoder's first output frame is that reconstruction.
        let (recon_video, _) = decode(&stream_a, &model, &codec).unwrap();
        assert_eq!(recon_video.frames[0].pixels, codec.recon.pixels);
    }

    #[test]
    fn sweep_writes_table_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(ModelConfig::toy()).unwrap();
        let codec = LosslessCodec;
        let video = synthetic_disc_clip(64, 4, 0.6, Fps::new(25, 1));
        let metrics = vec![
            MetricAdapter::builtin_psnr(),
            // Missing external command: the point is marked missing.
            MetricAdapter {
                kind: MetricKind::Dists,
                command: Some("false".into()),
            },
        ];
        let result = rd_sweep(
            &[("disc".to_string(), video)],
            &model,
            &codec,
            &[22, 32, 42, 52],
            &[(1, 50)],
            &metrics,
            dir.path(),
        )
        .unwrap();
        assert_eq!(result.rows.len(), 4, "four QPs give a four-row table");
        assert!(result.rows.iter().all(|r| r.scores[0].is_some()));
        assert!(result.rows.iter().all(|r| r.scores[1].is_none()));
        let csv = std::fs::read_to_string(dir.path().join("rd_table.csv")).unwrap();
        assert!(csv.starts_with("sequence,qp,delta,rate_kbps,PSNR,1-DISTS"));
        assert_eq!(csv.lines().count(), 5);
        let svg = std::fs::read_to_string(dir.path().join("rd_psnr.svg")).unwrap();
        assert!(svg.contains("Bit-rate (kbps)"));
        let svg = std::fs::read_to_string(dir.path().join("rd_dists.svg")).unwrap();
        assert!(svg.contains("1-DISTS") || svg.contains("<svg"));
        // Empty sequence list errors out before writing anything.
        let empty_dir = dir.path().join("empty");
        let err = rd_sweep(&[], &model, &codec, &[22, 32], &[(1, 50)], &metrics, &empty_dir);
        assert!(err.is_err());
        assert!(!empty_dir.exists(), "no partial files on error");
    }

    #[test]
    fn metric_adapter_external_command() {
        let a = synthetic_disc_clip(8, 2, 0.3, Fps::new(25, 1));
        let adapter = MetricAdapter {
            kind: MetricKind::Dists,
            command: Some("echo 0.25".into()),
        };
        let raw = adapter.measure(&a, &a).unwrap();
        assert_eq!(raw, 0.25);
        assert_eq!(adapter.kind.display_value(raw), 0.75);
        assert_eq!(MetricKind::Fvd.display_value(390.17), 5000.0 - 390.17);
    }

    #[test]
    fn rd_csv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        std::fs::write(&path, "rate_kbps,quality\n20,0.6\n35,0.68\n60,0.76\n110,0.84\n").unwrap();
        let curve = read_rd_csv(&path).unwrap();
        assert_eq!(curve.len(), 4);
        assert_eq!(curve[0].rate_kbps, 20.0);
        std::fs::write(&path, "20,0.6\nbad,line\n").unwrap();
        assert!(read_rd_csv(&path).is_err());
    }
}
