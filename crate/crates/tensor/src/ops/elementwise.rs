use crate::error::{Result, TensorError};
use crate::tape::{BinaryKind, Op, UnaryKind, Var};
use crate::tensor::{numel, strides};

/// Output shape of a trailing-dimension-aligned broadcast.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output indices of a broadcast back to flat input indices.
pub(crate) enum BroadcastIndex {
    Same,
    Scalar,
    /// Input shape is a suffix of the output shape.
    Suffix(usize),
    General(Vec<usize>),
}

impl BroadcastIndex {
    pub(crate) fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Self::Same;
        }
        let n_in = numel(inp);
        if n_in == 1 {
            return Self::Scalar;
        }
        let trimmed: Vec<usize> = {
            let lead = inp.iter().take_while(|&&d| d == 1).count();
            inp[lead..].to_vec()
        };
        if out.ends_with(&trimmed) {
            return Self::Suffix(n_in);
        }
        let offset = out.len() - inp.len();
        let in_strides = strides(inp);
        let out_strides = strides(out);
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut src = 0;
            for (d, &os) in out_strides.iter().enumerate() {
                let idx = rem / os;
                rem %= os;
                if d >= offset && inp[d - offset] != 1 {
                    src += idx * in_strides[d - offset];
                }
            }
            map.push(src);
        }
        Self::General(map)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Suffix(n) => i % n,
            Self::General(m) => m[i],
        }
    }
}

pub(crate) fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
        BinaryKind::Maximum => x.max(y),
        BinaryKind::Minimum => x.min(y),
    }
}

pub(crate) fn apply_unary(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Scale(c) => c * x,
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Powf(p) => x.powf(p),
        UnaryKind::Clamp(lo, hi) | UnaryKind::ClampStraightThrough(lo, hi) => x.clamp(lo, hi),
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn binary(&self, other: &Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::Shape {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(), other.value());
        let ia = BroadcastIndex::new(&out_shape, &sa);
        let ib = BroadcastIndex::new(&out_shape, &sb);
        let out = (0..numel(&out_shape))
            .map(|i| apply_binary(kind, va[ia.get(i)], vb[ib.get(i)]))
            .collect();
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    /// Elementwise maximum; the gradient goes to `self` on ties.
    pub fn maximum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Maximum, "maximum")
    }

    /// Elementwise minimum; the gradient goes to `self` on ties.
    pub fn minimum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Minimum, "minimum")
    }

    fn unary(&self, kind: UnaryKind) -> Var<'t> {
        let out = self.value().iter().map(|&x| apply_unary(kind, x)).collect();
        self.tape
            .push(self.shape(), out, Op::Unary { kind, x: self.id })
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(UnaryKind::Sin)
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(UnaryKind::Cos)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(UnaryKind::Powf(p))
    }

    /// Clamp with the true (zero outside the range) gradient.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// Clamp whose backward pass is the identity.
    pub fn clamp_straight_through(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryKind::ClampStraightThrough(lo, hi))
    }

    /// `1 - self`.
    pub fn one_minus(&self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }
}
