//! Independent scalar-loop reference implementations used as test oracles.
//! Deliberately written with plain nested loops over `Vec<Vec<f64>>`.

#![allow(dead_code)]

use minidistill::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_f64(&[m.len(), m[0].len()], &flat).unwrap()
}

pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-bound..bound)).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            c[i][j] = s;
        }
    }
    c
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Random row-stochastic matrix.
pub fn random_distribution<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    random_mat(rng, rows, cols, 3.0).iter().map(|r| softmax(r)).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..p.len() {
        if p[j] > 0.0 {
            s += p[j] * (p[j] / q[j]).ln();
        }
    }
    s
}

/// Top-left `valid`×`valid` block with rows renormalized.
pub fn restrict(a: &Mat, valid: usize) -> Mat {
    let mut out = Vec::with_capacity(valid);
    for row in a.iter().take(valid) {
        let s: f64 = row[..valid].iter().sum();
        out.push(row[..valid].iter().map(|x| x / s).collect());
    }
    out
}

/// Mean over heads and valid query rows of row-wise KL.
pub fn relation_kl(teacher: &[Mat], student: &[Mat], valid: usize) -> f64 {
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        let (t, s) = (restrict(t, valid), restrict(s, valid));
        for i in 0..valid {
            total += kl(&t[i], &s[i]);
        }
    }
    total / (teacher.len() * valid) as f64
}

/// Attention-transfer loss over last-layer attention maps.
pub fn attention_transfer(teacher: &[Mat], student: &[Mat], valid: usize) -> f64 {
    relation_kl(teacher, student, valid)
}

/// `softmax(V Vᵀ / sqrt(dk))` over the leading `valid` positions.
pub fn value_relation(v: &Mat, dk: usize, valid: usize) -> Mat {
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Vec::with_capacity(valid);
    for i in 0..valid {
        let mut scores = vec![0.0; valid];
        for (j, score) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for c in 0..v[i].len() {
                dot += v[i][c] * v[j][c];
            }
            *score = dot * scale;
        }
        out.push(softmax(&scores));
    }
    out
}

pub fn value_relation_loss(teacher: &[Mat], student: &[Mat], valid: usize) -> f64 {
    let t: Vec<Mat> = teacher.iter().map(|v| value_relation(v, v[0].len(), valid)).collect();
    let s: Vec<Mat> = student.iter().map(|v| value_relation(v, v[0].len(), valid)).collect();
    relation_kl(&t, &s, valid)
}

pub fn minilm(t_att: &[Mat], s_att: &[Mat], t_val: &[Mat], s_val: &[Mat], valid: usize) -> f64 {
    attention_transfer(t_att, s_att, valid) + value_relation_loss(t_val, s_val, valid)
}

/// Splits columns into `heads` equal blocks.
pub fn split_heads(h: &Mat, heads: usize) -> Vec<Mat> {
    let w = h[0].len() / heads;
    (0..heads)
        .map(|a| h.iter().map(|r| r[a * w..(a + 1) * w].to_vec()).collect())
        .collect()
}

pub fn hidden_relation(teacher: &Mat, student: &Mat, heads: usize, valid: usize) -> f64 {
    value_relation_loss(&split_heads(teacher, heads), &split_heads(student, heads), valid)
}

pub fn soft_label(teacher: &Mat, student: &Mat, masked: &[usize], temp: f64) -> f64 {
    let mut total = 0.0;
    for &t in masked {
        let p = softmax(&teacher[t].iter().map(|x| x / temp).collect::<Vec<_>>());
        let q = softmax(&student[t].iter().map(|x| x / temp).collect::<Vec<_>>());
        total += kl(&p, &q);
    }
    temp * temp * total / masked.len() as f64
}

pub fn value_mse(teacher: &[Mat], student: &[Mat], proj: Option<&Mat>, valid: usize) -> f64 {
    let mut total = 0.0;
    for (t, s) in teacher.iter().zip(student) {
        let s = match proj {
            Some(p) => matmul(s, p),
            None => s.clone(),
        };
        let mut sq = 0.0;
        for i in 0..valid {
            for c in 0..t[i].len() {
                sq += (t[i][c] - s[i][c]).powi(2);
            }
        }
        total += sq / (valid * t[0].len()) as f64;
    }
    total / teacher.len() as f64
}

/// Random orthogonal matrix by Gram–Schmidt on a random square matrix.
pub fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Mat {
    let mut q: Mat = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.iter().map(|x| x / norm).collect());
        }
    }
    q
}

/// Scalar Adam with decoupled weight decay, one parameter at a time.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(&mut self, w: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        w - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * w
    }
}
