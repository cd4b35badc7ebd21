//! Forward-pass reference for the visual side: two encoders' patch
//! embeddings are stacked, folded five tokens at a time, and projected into
//! the language model's width by `Linear -> GELU -> Linear`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of each encoder's patch embeddings.
pub const ENCODER_DIM: usize = 768;
/// Adjacent tokens folded into one.
pub const GROUP_SIZE: usize = 5;
pub const GROUPED_DIM: usize = ENCODER_DIM * GROUP_SIZE;
/// Llama-2-7B hidden size.
pub const DEFAULT_LM_DIM: usize = 4096;
/// Half-width of the uniform fixture initializer.
pub const INIT_RANGE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{rows} tokens cannot be grouped by {GROUP_SIZE}")]
    Divisibility { rows: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("epsilon {0} outside (0, 1e-2]")]
    Epsilon(f64),
    #[error("matrix file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Encoder1,
    Encoder2,
    Fused,
}

/// `P x 768` patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    provenance: Provenance,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>, provenance: Provenance) -> Result<Self, FusionError> {
        if data.ncols() != ENCODER_DIM {
            return Err(FusionError::Shape(format!("embeddings have {} columns, expected {ENCODER_DIM}", data.ncols())));
        }
        Ok(Self { data, provenance })
    }

    pub fn zeros(rows: usize, provenance: Provenance) -> Self {
        Self { data: Array2::zeros((rows, ENCODER_DIM)), provenance }
    }

    /// Seeded standard-uniform fixture in `[-1, 1]`.
    pub fn seeded(rows: usize, provenance: Provenance, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_simple_fn((rows, ENCODER_DIM), || rng.random_range(-1.0..=1.0));
        Self { data, provenance }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// `M x 3840` folded tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedEmbedding {
    data: Array2<f64>,
}

impl GroupedEmbedding {
    pub fn new(data: Array2<f64>) -> Result<Self, FusionError> {
        if data.ncols() != GROUPED_DIM {
            return Err(FusionError::Shape(format!("grouped tokens have {} columns, expected {GROUPED_DIM}", data.ncols())));
        }
        Ok(Self { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupMode {
    #[default]
    Strict,
    /// Append zero rows up to the next multiple of five.
    PadZeros,
}

/// Stack `z1` above `z2`.
pub fn concat_embeddings(z1: &EmbeddingMatrix, z2: &EmbeddingMatrix) -> EmbeddingMatrix {
    let data = concatenate(Axis(0), &[z1.view(), z2.view()]).expect("both have 768 columns");
    EmbeddingMatrix { data, provenance: Provenance::Fused }
}

/// Fold every five consecutive rows into one 3840-wide row.
pub fn group_tokens(z: &EmbeddingMatrix, mode: GroupMode) -> Result<GroupedEmbedding, FusionError> {
    let rows = z.rows();
    let padded = match (rows % GROUP_SIZE, mode) {
        (0, _) => rows,
        (_, GroupMode::Strict) => return Err(FusionError::Divisibility { rows }),
        (r, GroupMode::PadZeros) => rows + GROUP_SIZE - r,
    };
    let flat: Vec<f64> = z
        .data
        .iter()
        .copied()
        .chain(std::iter::repeat_n(0.0, (padded - rows) * ENCODER_DIM))
        .collect();
    // row-major: five consecutive 768-rows are one contiguous 3840-row
    let data = Array2::from_shape_vec((padded / GROUP_SIZE, GROUPED_DIM), flat).expect("length matches shape");
    Ok(GroupedEmbedding { data })
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// `Phi(x) + x * phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// Drops the non-linearity; for exercising the linear parts alone.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_derivative(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Two linear layers with an activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    activation: Activation,
}

impl ProjectionWeights {
    pub fn new(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self, FusionError> {
        if w1.nrows() != GROUPED_DIM {
            return Err(FusionError::Shape(format!("W1 has {} rows, expected {GROUPED_DIM}", w1.nrows())));
        }
        if b1.len() != w1.ncols() || w2.nrows() != w1.ncols() {
            return Err(FusionError::Shape(format!(
                "hidden width disagrees: W1 {:?}, b1 {}, W2 {:?}",
                w1.dim(),
                b1.len(),
                w2.dim()
            )));
        }
        if b2.len() != w2.ncols() {
            return Err(FusionError::Shape(format!("b2 has {} entries, W2 has {} columns", b2.len(), w2.ncols())));
        }
        for (name, finite) in [
            ("W1", w1.iter().all(|v| v.is_finite())),
            ("b1", b1.iter().all(|v| v.is_finite())),
            ("W2", w2.iter().all(|v| v.is_finite())),
            ("b2", b2.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(FusionError::NonFinite(name));
            }
        }
        Ok(Self { w1, b1, w2, b2, activation: Activation::Gelu })
    }

    /// Deterministic uniform `[-0.02, 0.02]` initialization.
    pub fn seeded(hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = move || rng.random_range(-INIT_RANGE..=INIT_RANGE);
        let w1 = Array2::from_shape_simple_fn((GROUPED_DIM, hidden), &mut draw);
        let b1 = Array1::from_shape_simple_fn(hidden, &mut draw);
        let w2 = Array2::from_shape_simple_fn((hidden, out_dim), &mut draw);
        let b2 = Array1::from_shape_simple_fn(out_dim, &mut draw);
        Self { w1, b1, w2, b2, activation: Activation::Gelu }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }
    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Scale the output layer weights by `c`.
    pub fn scale_output(&mut self, c: f64) {
        self.w2 *= c;
    }

    fn pre_activation(&self, q: ArrayView2<'_, f64>) -> Array2<f64> {
        q.dot(&self.w1) + &self.b1
    }

    fn hidden_layer(&self, q: ArrayView2<'_, f64>) -> Array2<f64> {
        let act = self.activation;
        self.pre_activation(q).mapv_into(|x| act.apply(x))
    }

    fn output_layer(&self, h: ArrayView2<'_, f64>) -> Array2<f64> {
        h.dot(&self.w2) + &self.b2
    }
}

/// `act(Q W1 + b1) W2 + b2`, row-wise.
pub fn project(q: &GroupedEmbedding, w: &ProjectionWeights) -> Array2<f64> {
    let h = w.hidden_layer(q.view());
    w.output_layer(h.view())
}

/// Shapes seen along the forward pass, for reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub encoder1: [usize; 2],
    pub encoder2: [usize; 2],
    pub concatenated: [usize; 2],
    pub grouped: [usize; 2],
    pub hidden: [usize; 2],
    pub output: [usize; 2],
}

/// Concatenate, group and project.
pub fn fused_forward(
    z1: &EmbeddingMatrix,
    z2: &EmbeddingMatrix,
    w: &ProjectionWeights,
    mode: GroupMode,
) -> Result<(Array2<f64>, ShapeTrace), FusionError> {
    let z = concat_embeddings(z1, z2);
    let q = group_tokens(&z, mode)?;
    let v = project(&q, w);
    let trace = ShapeTrace {
        encoder1: [z1.rows(), ENCODER_DIM],
        encoder2: [z2.rows(), ENCODER_DIM],
        concatenated: [z.rows(), ENCODER_DIM],
        grouped: [q.rows(), GROUPED_DIM],
        hidden: [q.rows(), w.hidden()],
        output: [v.nrows(), v.ncols()],
    };
    Ok((v, trace))
}

/// Perturbation of every input of [`project`].
struct Tangent {
    q: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Tangent {
    fn random(q: &GroupedEmbedding, w: &ProjectionWeights, rng: &mut ChaCha8Rng, mask: [bool; 5]) -> Self {
        fn block2(dim: (usize, usize), on: bool, rng: &mut ChaCha8Rng) -> Array2<f64> {
            if on {
                Array2::from_shape_simple_fn(dim, || rng.random_range(-1.0..=1.0))
            } else {
                Array2::zeros(dim)
            }
        }
        fn block1(len: usize, on: bool, rng: &mut ChaCha8Rng) -> Array1<f64> {
            if on {
                Array1::from_shape_simple_fn(len, || rng.random_range(-1.0..=1.0))
            } else {
                Array1::zeros(len)
            }
        }
        Self {
            q: block2(q.data.dim(), mask[0], rng),
            w1: block2(w.w1.dim(), mask[1], rng),
            b1: block1(w.b1.len(), mask[2], rng),
            w2: block2(w.w2.dim(), mask[3], rng),
            b2: block1(w.b2.len(), mask[4], rng),
        }
    }

    fn shifted(&self, q: &GroupedEmbedding, w: &ProjectionWeights, step: f64) -> (GroupedEmbedding, ProjectionWeights) {
        let q = GroupedEmbedding { data: &q.data + &(&self.q * step) };
        let w = ProjectionWeights {
            w1: &w.w1 + &(&self.w1 * step),
            b1: &w.b1 + &(&self.b1 * step),
            w2: &w.w2 + &(&self.w2 * step),
            b2: &w.b2 + &(&self.b2 * step),
            activation: w.activation,
        };
        (q, w)
    }
}

/// Analytic directional derivative of [`project`] along `t`.
fn jvp(q: &GroupedEmbedding, w: &ProjectionWeights, t: &Tangent) -> Array2<f64> {
    let a = w.pre_activation(q.view());
    let act = w.activation;
    let h = a.mapv(|x| act.apply(x));
    let da = t.q.dot(&w.w1) + q.data.dot(&t.w1) + &t.b1;
    let mut dh = da;
    Zip::from(&mut dh).and(&a).for_each(|d, &x| *d *= act.derivative(x));
    dh.dot(&w.w2) + h.dot(&t.w2) + &t.b2
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub epsilon: f64,
    pub directions: usize,
    /// Max over directions of `|J_a v - J_fd v| / max(|J_a v|, |J_fd v|)`.
    pub max_relative_error: f64,
    /// Joint direction first, then one per block: Q, W1, b1, W2, b2.
    pub per_direction: Vec<f64>,
}

const CHECK_SEED: u64 = 0x006e_616c_7974_6963;

/// Compare analytic Jacobian-vector products of [`project`] with central
/// finite differences along random directions: one per parameter block plus
/// one moving everything at once.
pub fn check_gradient(w: &ProjectionWeights, q: &GroupedEmbedding, epsilon: f64) -> Result<GradientCheck, FusionError> {
    check_gradient_seeded(w, q, epsilon, CHECK_SEED)
}

pub fn check_gradient_seeded(
    w: &ProjectionWeights,
    q: &GroupedEmbedding,
    epsilon: f64,
    seed: u64,
) -> Result<GradientCheck, FusionError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(FusionError::Epsilon(epsilon));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = [
        [true; 5],
        [true, false, false, false, false],
        [false, true, false, false, false],
        [false, false, true, false, false],
        [false, false, false, true, false],
        [false, false, false, false, true],
    ];
    let mut per_direction = Vec::with_capacity(masks.len());
    for mask in masks {
        let t = Tangent::random(q, w, &mut rng, mask);
        let analytic = jvp(q, w, &t);
        let (qp, wp) = t.shifted(q, w, epsilon);
        let (qm, wm) = t.shifted(q, w, -epsilon);
        let numeric = (project(&qp, &wp) - project(&qm, &wm)) / (2.0 * epsilon);
        let scale = frobenius(&analytic).max(frobenius(&numeric));
        let err = if scale == 0.0 { 0.0 } else { frobenius(&(&analytic - &numeric)) / scale };
        per_direction.push(err);
    }
    let worst = per_direction.iter().copied().fold(0.0, f64::max);
    Ok(GradientCheck { epsilon, directions: masks.len(), max_relative_error: worst, per_direction })
}

/// Serialize as two little-endian `u64` (rows, cols) followed by row-major
/// little-endian `f64` values.
pub fn encode_matrix(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + m.len() * 8);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f64>, FusionError> {
    if bytes.len() < 16 {
        return Err(FusionError::Format("missing shape header".into()));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| FusionError::Format(format!("shape {rows}x{cols} overflows")))?;
    let body = &bytes[16..];
    if body.len() / 8 != count || !body.len().is_multiple_of(8) {
        return Err(FusionError::Format(format!("{rows}x{cols} needs {} bytes, found {}", count * 8, body.len())));
    }
    let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Array2::from_shape_vec((rows as usize, cols as usize), values).map_err(|e| FusionError::Format(e.to_string()))
}

/// A `1 x n` matrix file read as a vector.
pub fn decode_vector(bytes: &[u8]) -> Result<Array1<f64>, FusionError> {
    let m = decode_matrix(bytes)?;
    if m.nrows() != 1 {
        return Err(FusionError::Format(format!("expected a 1xN vector, got {:?}", m.dim())));
    }
    Ok(m.row(0).to_owned())
}

/// Slice of rows `[start, end)` of a grouped embedding.
pub fn grouped_rows(q: &GroupedEmbedding, start: usize, end: usize) -> GroupedEmbedding {
    GroupedEmbedding { data: q.data.slice(s![start..end, ..]).to_owned() }
}
