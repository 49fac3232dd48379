//! Spectrum decomposition into spectral bases and the sliding-window
//! streaming extractor.
//!
//! The decomposition is a thin SVD computed by one-sided Jacobi rotations on
//! the smaller matrix dimension. Accuracy is favored over speed (C <= 40 and
//! window frame counts are small); the reconstruction invariant in the tests
//! keeps it honest.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

use crate::frontend::{FrameSpec, MelSpectrogram};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("input contains non-finite entries")]
    NonFinite,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("basis count {d} outside 1..={max}")]
    BadBasisCount { d: usize, max: usize },
    #[error("window of {width_ms} ms is shorter than one frontend hop ({hop_ms} ms)")]
    WindowTooNarrow { width_ms: f64, hop_ms: f64 },
}

/// Thin SVD of a C x T spectrogram: `values = left * diag(singular) * right`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// C x r, orthonormal columns (spectral bases).
    pub left_vectors: Array2<f64>,
    /// Length r, nonincreasing, nonnegative.
    pub singular_values: Array1<f64>,
    /// r x T (rows are the temporal bases).
    pub right_vectors: Array2<f64>,
}

impl SpectralDecomposition {
    pub fn rank_bound(&self) -> usize {
        self.singular_values.len()
    }

    /// U * diag(sigma) * Vt
    pub fn reconstruct(&self) -> Array2<f64> {
        let r = self.singular_values.len();
        let mut scaled = self.right_vectors.clone();
        for i in 0..r {
            let s = self.singular_values[i];
            scaled.row_mut(i).mapv_inplace(|v| v * s);
        }
        self.left_vectors.dot(&scaled)
    }
}

/// Flattened top-d spectral bases for one analysis window.
#[derive(Debug, Clone)]
pub struct SpectralBasisFeature {
    /// d * C values, basis-major: basis 1 fully, then basis 2, ...
    pub values: Vec<f64>,
    pub d: usize,
    /// (start_frame, end_frame), end exclusive, utterance-relative.
    pub window_span: (usize, usize),
}

/// One-sided Jacobi orthogonalization of the columns of `b` (m x n, n <= m).
/// Returns (b_rotated, v) with b = b_rotated * v^T and v orthogonal n x n.
fn jacobi_orthogonalize(mut b: Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = b.ncols();
    let mut v = Array2::eye(n);
    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let col_p = b.column(p);
                let col_q = b.column(q);
                let app: f64 = col_p.dot(&col_p);
                let aqq: f64 = col_q.dot(&col_q);
                let apq: f64 = col_p.dot(&col_q);
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..b.nrows() {
                    let bip = b[[i, p]];
                    let biq = b[[i, q]];
                    b[[i, p]] = c * bip - s * biq;
                    b[[i, q]] = s * bip + c * biq;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (b, v)
}

/// Deterministically extend `cols` (orthonormal columns of an m x k matrix)
/// with unit vectors orthogonal to all previous ones, via Gram-Schmidt over
/// the standard basis.
fn complete_orthonormal(cols: &mut Vec<Array1<f64>>, m: usize, want: usize) {
    let mut cand = 0usize;
    while cols.len() < want && cand < m {
        let mut e = Array1::zeros(m);
        e[cand] = 1.0;
        for c in cols.iter() {
            let proj = c.dot(&e);
            e = &e - &(c * proj);
        }
        let norm = e.dot(&e).sqrt();
        if norm > 1e-3 {
            cols.push(e / norm);
        }
        cand += 1;
    }
}

/// Fix the SVD sign ambiguity: in each left vector the entry of largest
/// magnitude (lowest index on ties) is made nonnegative.
fn apply_sign_convention(u: &mut Array2<f64>, vt: &mut Array2<f64>) {
    for j in 0..u.ncols() {
        let col = u.column(j);
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            u.column_mut(j).mapv_inplace(|x| -x);
            if j < vt.nrows() {
                vt.row_mut(j).mapv_inplace(|x| -x);
            }
        }
    }
}

/// Thin SVD with descending singular values and a deterministic sign
/// convention. `r = min(C, T)`; zero singular values get orthonormal
/// completion vectors so the left factor stays orthonormal.
pub fn svd_decompose_matrix(
    matrix: ArrayView2<f64>,
) -> Result<SpectralDecomposition, SpectralError> {
    let (c, t) = matrix.dim();
    if c == 0 || t == 0 {
        return Err(SpectralError::EmptyInput(format!("{c} x {t} matrix")));
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let r = c.min(t);

    // Orthogonalize columns of the thinner orientation.
    let (u, sigma, vt) = if t <= c {
        // B = A (C x T): A = (BV) V^T, columns of BV orthogonal
        let (bv, v) = jacobi_orthogonalize(matrix.to_owned());
        collect_factors(bv, v, c, t, r, false)
    } else {
        // B = A^T (T x C): A^T = (BW) W^T => A = W (BW)^T
        let (bw, w) = jacobi_orthogonalize(matrix.t().to_owned());
        collect_factors(bw, w, t, c, r, true)
    };

    let mut u = u;
    let mut vt = vt;
    apply_sign_convention(&mut u, &mut vt);
    Ok(SpectralDecomposition {
        left_vectors: u,
        singular_values: sigma,
        right_vectors: vt,
    })
}

/// Assemble (U, sigma, V^T) from orthogonalized columns. `swapped` means the
/// Jacobi ran on the transpose, so the roles of the factors flip.
fn collect_factors(
    b: Array2<f64>,
    v: Array2<f64>,
    m: usize,
    n: usize,
    r: usize,
    swapped: bool,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let mut order: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let col = b.column(j);
            (col.dot(&col).sqrt(), j)
        })
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut sigma = Array1::zeros(r);
    let mut big_cols: Vec<Array1<f64>> = Vec::with_capacity(r); // normalized columns of B*V side (length m)
    let mut small_cols: Vec<Array1<f64>> = Vec::with_capacity(r); // columns of V (length n)
    // consider a singular value numerically zero below this relative cutoff
    let max_sigma = order.first().map(|o| o.0).unwrap_or(0.0);
    let cutoff = max_sigma * 1e-13;
    for (k, (s, j)) in order.iter().take(r).enumerate() {
        sigma[k] = *s;
        small_cols.push(v.column(*j).to_owned());
        if *s > cutoff && *s > 0.0 {
            big_cols.push(b.column(*j).mapv(|x| x / s));
        }
    }
    for k in big_cols.len()..r {
        sigma[k] = 0.0;
    }
    complete_orthonormal(&mut big_cols, m, r);

    let stack = |cols: &[Array1<f64>], rows: usize| {
        let mut out = Array2::zeros((rows, cols.len()));
        for (j, c) in cols.iter().enumerate() {
            out.column_mut(j).assign(c);
        }
        out
    };
    if !swapped {
        // m = C, n = T: U = normalized B columns, V = v
        let u = stack(&big_cols, m);
        let vmat = stack(&small_cols, n);
        (u, sigma, vmat.t().to_owned())
    } else {
        // m = T, n = C: U = v columns, V = normalized B columns
        let u = stack(&small_cols, n);
        let vmat = stack(&big_cols, m);
        (u, sigma, vmat.t().to_owned())
    }
}

pub fn svd_decompose(spectrogram: &MelSpectrogram) -> Result<SpectralDecomposition, SpectralError> {
    svd_decompose_matrix(spectrogram.values.view())
}

/// Flatten the top `d` spectral bases into a d*C feature, zero-padding the
/// columns beyond `min(C, T)`.
pub fn select_top_bases(
    dec: &SpectralDecomposition,
    d: usize,
) -> Result<SpectralBasisFeature, SpectralError> {
    let c = dec.left_vectors.nrows();
    if d < 1 || d > c {
        return Err(SpectralError::BadBasisCount { d, max: c });
    }
    let r = dec.left_vectors.ncols();
    let mut values = vec![0.0; d * c];
    for j in 0..d.min(r) {
        for i in 0..c {
            values[j * c + i] = dec.left_vectors[[i, j]];
        }
    }
    Ok(SpectralBasisFeature {
        values,
        d,
        window_span: (0, dec.right_vectors.ncols()),
    })
}

/// Analysis window over the frame stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowWidth {
    /// One window spanning the whole utterance.
    Utterance,
    Millis(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlidingWindowSpec {
    pub width: WindowWidth,
    /// Hop between window starts; `None` means hop = width (non-overlapping).
    pub hop_ms: Option<f64>,
}

impl SlidingWindowSpec {
    pub fn utterance() -> Self {
        SlidingWindowSpec { width: WindowWidth::Utterance, hop_ms: None }
    }

    pub fn millis(width_ms: f64) -> Self {
        SlidingWindowSpec { width: WindowWidth::Millis(width_ms), hop_ms: None }
    }

    /// Window width in frontend frames (>= 1), or None for whole-utterance.
    pub fn width_frames(&self, frame_spec: &FrameSpec) -> Result<Option<usize>, SpectralError> {
        match self.width {
            WindowWidth::Utterance => Ok(None),
            WindowWidth::Millis(ms) => {
                if ms < frame_spec.frame_hop_ms {
                    return Err(SpectralError::WindowTooNarrow {
                        width_ms: ms,
                        hop_ms: frame_spec.frame_hop_ms,
                    });
                }
                Ok(Some(((ms / frame_spec.frame_hop_ms) as usize).max(1)))
            }
        }
    }

    pub fn hop_frames(&self, frame_spec: &FrameSpec) -> Result<Option<usize>, SpectralError> {
        match self.hop_ms {
            None => self.width_frames(frame_spec),
            Some(ms) => Ok(Some(((ms / frame_spec.frame_hop_ms) as usize).max(1))),
        }
    }
}

/// Streaming spectral-basis extractor for one utterance. Frames are pushed in
/// time order; a feature is emitted whenever a window fills. Each feature
/// depends only on frames inside its window.
pub struct StreamingExtractor {
    width: Option<usize>,
    hop: usize,
    d: usize,
    n_channels: usize,
    buffer: Vec<Array1<f64>>,
    buffer_start: usize,
    frames_seen: usize,
    emitted: bool,
}

impl StreamingExtractor {
    pub fn new(
        window: SlidingWindowSpec,
        frame_spec: &FrameSpec,
        d: usize,
    ) -> Result<Self, SpectralError> {
        if d < 1 || d > frame_spec.n_mels {
            return Err(SpectralError::BadBasisCount { d, max: frame_spec.n_mels });
        }
        let width = window.width_frames(frame_spec)?;
        let hop = match window.hop_frames(frame_spec)? {
            Some(h) => h,
            None => 1, // unused in whole-utterance mode
        };
        Ok(StreamingExtractor {
            width,
            hop,
            d,
            n_channels: frame_spec.n_mels,
            buffer: Vec::new(),
            buffer_start: 0,
            frames_seen: 0,
            emitted: false,
        })
    }

    /// Push one frame (length C); returns a feature when a window completes.
    pub fn push_frame(
        &mut self,
        frame: Array1<f64>,
    ) -> Result<Option<SpectralBasisFeature>, SpectralError> {
        assert_eq!(frame.len(), self.n_channels, "frame width");
        self.buffer.push(frame);
        self.frames_seen += 1;
        if let Some(w) = self.width {
            if self.buffer.len() == w {
                let feat = self.emit()?;
                return Ok(Some(feat));
            }
        }
        Ok(None)
    }

    /// End of stream: emit a feature for any remaining partial window, or the
    /// whole utterance in sentinel mode.
    pub fn finish(&mut self) -> Result<Option<SpectralBasisFeature>, SpectralError> {
        if self.buffer.is_empty() {
            if self.width.is_none() && !self.emitted && self.frames_seen > 0 {
                // all frames were consumed already (cannot happen: sentinel never emits early)
                unreachable!();
            }
            return Ok(None);
        }
        let feat = self.emit()?;
        Ok(Some(feat))
    }

    fn emit(&mut self) -> Result<SpectralBasisFeature, SpectralError> {
        let t = self.buffer.len();
        let mut mat = Array2::zeros((self.n_channels, t));
        for (j, col) in self.buffer.iter().enumerate() {
            mat.column_mut(j).assign(col);
        }
        let dec = svd_decompose_matrix(mat.view())?;
        let mut feat = select_top_bases(&dec, self.d)?;
        feat.window_span = (self.buffer_start, self.buffer_start + t);
        self.emitted = true;
        // advance by hop frames
        let advance = self.hop.min(self.buffer.len());
        self.buffer.drain(..advance);
        self.buffer_start += advance;
        Ok(feat)
    }
}

/// Run the streaming extractor over a full spectrogram.
pub fn streaming_extract(
    mel: &MelSpectrogram,
    window: SlidingWindowSpec,
    d: usize,
) -> Result<Vec<SpectralBasisFeature>, SpectralError> {
    let mut ex = StreamingExtractor::new(window, &mel.frame_spec, d)?;
    let mut out = Vec::new();
    for t in 0..mel.n_frames() {
        if let Some(f) = ex.push_frame(mel.values.column(t).to_owned())? {
            out.push(f);
        }
    }
    if let Some(f) = ex.finish()? {
        out.push(f);
    }
    Ok(out)
}

/// Batch path: whole-utterance decomposition and top-d selection.
pub fn batch_extract(
    mel: &MelSpectrogram,
    d: usize,
) -> Result<SpectralBasisFeature, SpectralError> {
    let dec = svd_decompose(mel)?;
    let mut feat = select_top_bases(&dec, d)?;
    feat.window_span = (0, mel.n_frames());
    Ok(feat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrameSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(c: usize, t: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((c, t), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn frobenius(m: &Array2<f64>) -> f64 {
        m.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_invariants(dec: &SpectralDecomposition, input: &Array2<f64>) {
        let u = &dec.left_vectors;
        for i in 0..u.ncols() {
            for j in 0..u.ncols() {
                let dot = u.column(i).dot(&u.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "u[{i}].u[{j}] = {dot}");
            }
        }
        for w in dec.singular_values.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(dec.singular_values.iter().all(|&s| s >= 0.0));
        let resid = frobenius(&(&dec.reconstruct() - input)) / frobenius(input).max(1.0);
        assert!(resid <= 1e-8, "reconstruction residual {resid}");
    }

    #[test]
    fn rank_one_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Array1<f64> = Array1::from_shape_fn(40, |_| rng.gen::<f64>() - 0.5);
        let mut m = Array2::zeros((40, 6));
        for j in 0..6 {
            m.column_mut(j).assign(&u);
        }
        let dec = svd_decompose_matrix(m.view()).unwrap();
        check_invariants(&dec, &m);
        let nonzero = dec.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(nonzero, 1);
        let b0 = dec.left_vectors.column(0);
        let un = &u / u.dot(&u).sqrt();
        let align = b0.dot(&un).abs();
        assert!((align - 1.0).abs() < 1e-10, "basis aligns with u: {align}");
    }

    #[test]
    fn random_40x50_reconstructs() {
        let m = random_matrix(40, 50, 42);
        let dec = svd_decompose_matrix(m.view()).unwrap();
        check_invariants(&dec, &m);
        assert_eq!(dec.singular_values.len(), 40);
    }

    #[test]
    fn rank_bound_on_wide_thin_input() {
        // 40 x 3: at most 3 nonzero singular values by construction
        let m = random_matrix(40, 3, 9);
        let dec = svd_decompose_matrix(m.view()).unwrap();
        check_invariants(&dec, &m);
        assert_eq!(dec.singular_values.len(), 3);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = random_matrix(4, 4, 2);
        m[[1, 2]] = f64::NAN;
        assert!(matches!(
            svd_decompose_matrix(m.view()),
            Err(SpectralError::NonFinite)
        ));
    }

    #[test]
    fn top_basis_dimensions() {
        let m = random_matrix(40, 12, 3);
        let dec = svd_decompose_matrix(m.view()).unwrap();
        assert_eq!(select_top_bases(&dec, 2).unwrap().values.len(), 80);
        assert_eq!(select_top_bases(&dec, 40).unwrap().values.len(), 1600);
        assert!(select_top_bases(&dec, 0).is_err());
        assert!(select_top_bases(&dec, 41).is_err());
    }

    #[test]
    fn top_basis_zero_padding_beyond_rank() {
        let m = random_matrix(40, 2, 8);
        let dec = svd_decompose_matrix(m.view()).unwrap();
        let feat = select_top_bases(&dec, 3).unwrap();
        assert_eq!(feat.values.len(), 120);
        assert!(feat.values[80..].iter().all(|&v| v == 0.0));
        for j in 0..2 {
            let norm: f64 = feat.values[j * 40..(j + 1) * 40]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn d1_on_rank_one_projects_exactly() {
        let mut m = Array2::zeros((8, 5));
        let u = Array1::from_vec(vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25, 2.0, -0.75]);
        for j in 0..5 {
            let scale = (j as f64 + 1.0) * 0.3;
            m.column_mut(j).assign(&(&u * scale));
        }
        let dec = svd_decompose_matrix(m.view()).unwrap();
        let feat = select_top_bases(&dec, 1).unwrap();
        let b = Array1::from_vec(feat.values.clone());
        // projection residual of every column onto span(b)
        for j in 0..5 {
            let col = m.column(j);
            let proj = &b * col.dot(&b);
            let resid: f64 = (&col.to_owned() - &proj).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(resid <= 1e-8, "col {j} residual {resid}");
        }
    }

    #[test]
    fn sign_convention_largest_entry_nonnegative() {
        for seed in 0..20u64 {
            let m = random_matrix(10, 7, seed);
            let dec = svd_decompose_matrix(m.view()).unwrap();
            for j in 0..dec.left_vectors.ncols() {
                let col = dec.left_vectors.column(j);
                let mut best = 0usize;
                for i in 1..col.len() {
                    if col[i].abs() > col[best].abs() {
                        best = i;
                    }
                }
                assert!(col[best] >= 0.0);
            }
        }
    }

    fn mel_from(values: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram { values, frame_spec: FrameSpec::default() }
    }

    #[test]
    fn whole_utterance_window_equals_batch() {
        let m = random_matrix(40, 33, 17);
        let mel = mel_from(m);
        let batch = batch_extract(&mel, 2).unwrap();
        let stream = streaming_extract(&mel, SlidingWindowSpec::utterance(), 2).unwrap();
        assert_eq!(stream.len(), 1);
        assert_eq!(stream[0].values, batch.values);
        assert_eq!(stream[0].window_span, (0, 33));
    }

    /// Single-column SVD closed form: basis 1 is the normalized column.
    #[test]
    fn ten_ms_windows_single_column_closed_form() {
        let m = random_matrix(40, 9, 23).mapv(|x| x + 2.0);
        let mel = mel_from(m.clone());
        let feats = streaming_extract(&mel, SlidingWindowSpec::millis(10.0), 1).unwrap();
        assert_eq!(feats.len(), 9, "one feature per frame");
        for (t, f) in feats.iter().enumerate() {
            assert_eq!(f.window_span, (t, t + 1));
            let col = m.column(t);
            let norm = col.dot(&col).sqrt();
            // sign convention: largest-|entry| nonneg; column is positive here
            for (i, v) in f.values.iter().enumerate() {
                assert!((v - col[i] / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_tail_window_emits() {
        let m = random_matrix(40, 5, 31);
        let mel = mel_from(m);
        // 20 ms window = 2 frames; 5 frames -> windows [0,2),[2,4),[4,5)
        let feats = streaming_extract(&mel, SlidingWindowSpec::millis(20.0), 2).unwrap();
        assert_eq!(feats.len(), 3);
        assert_eq!(feats[2].window_span, (4, 5));
    }

    #[test]
    fn stream_shorter_than_window_still_yields_one_feature() {
        let m = random_matrix(40, 3, 37);
        let mel = mel_from(m);
        let feats = streaming_extract(&mel, SlidingWindowSpec::millis(250.0), 2).unwrap();
        assert_eq!(feats.len(), 1);
        assert_eq!(feats[0].window_span, (0, 3));
    }

    #[test]
    fn window_narrower_than_hop_rejected() {
        let spec = FrameSpec::default();
        assert!(matches!(
            SlidingWindowSpec::millis(5.0).width_frames(&spec),
            Err(SpectralError::WindowTooNarrow { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Eckart-Young: rank-d truncation error equals sqrt(sum of squared
        /// trailing singular values).
        #[test]
        fn eckart_young_truncation(seed in 0u64..1000, d in 1usize..8) {
            let m = random_matrix(8, 10, seed);
            let dec = svd_decompose_matrix(m.view()).unwrap();
            let r = dec.singular_values.len();
            let d = d.min(r);
            let mut trunc = Array2::<f64>::zeros((8, 10));
            for k in 0..d {
                let u = dec.left_vectors.column(k);
                let v = dec.right_vectors.row(k);
                let s = dec.singular_values[k];
                for i in 0..8 {
                    for j in 0..10 {
                        trunc[[i, j]] += s * u[i] * v[j];
                    }
                }
            }
            let err = frobenius(&(&m - &trunc));
            let tail: f64 = dec.singular_values.iter().skip(d).map(|s| s * s).sum::<f64>().sqrt();
            prop_assert!((err - tail).abs() <= 1e-8, "err {} tail {}", err, tail);
        }

        /// Repeated runs produce identical features (sign determinism).
        #[test]
        fn repeated_runs_identical(seed in 0u64..500) {
            let m = random_matrix(12, 9, seed);
            let a = svd_decompose_matrix(m.view()).unwrap();
            let b = svd_decompose_matrix(m.view()).unwrap();
            prop_assert_eq!(a.left_vectors, b.left_vectors);
            prop_assert_eq!(a.singular_values, b.singular_values);
        }
    }
}
