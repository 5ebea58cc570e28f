//! Blind source separation: model-order estimation by the eigenvalue-based
//! minimum description length criterion, endmember extraction by vertex
//! component analysis, and simplex-constrained abundance estimation by fully
//! constrained least squares.

use crate::cube::Cube;
use crate::error::{Error, Result};
use crate::linalg::{solve_vec, sym_eig};
use ndarray::{Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Result of the unmixing pipeline.
#[derive(Debug, Clone)]
pub struct UnmixResult {
    pub n_sources: usize,
    /// `M x N` selected endmember spectra.
    pub endmembers: Array2<f64>,
    /// `N x L` simplex abundances.
    pub abundances: Array2<f64>,
    pub width: usize,
    pub height: usize,
}

impl UnmixResult {
    pub fn validate(&self) -> Result<()> {
        for col in self.abundances.columns() {
            let mut sum = 0.0;
            for v in col.iter() {
                if *v < -1e-9 {
                    return Err(Error::InvalidSpec(format!("negative abundance {v}")));
                }
                sum += *v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidSpec(format!("abundance sum {sum}")));
            }
        }
        for i in 0..self.n_sources {
            for j in i + 1..self.n_sources {
                let a: Vec<f64> = self.endmembers.column(i).to_vec();
                let b: Vec<f64> = self.endmembers.column(j).to_vec();
                if spectral_angle_deg(&a, &b) <= 0.0 {
                    return Err(Error::DegenerateData(format!(
                        "endmembers {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(())
    }

    /// All abundance maps as one cube, one band per source.
    pub fn abundance_cube(&self) -> Result<Cube<f64>> {
        let wl: Vec<f64> = (1..=self.n_sources).map(|i| i as f64).collect();
        Cube::new(self.abundances.clone(), self.width, self.height, wl)
    }

    /// Single-source abundance map.
    pub fn abundance_band(&self, source: usize) -> Result<Cube<f64>> {
        let row = self
            .abundances
            .row(source)
            .to_owned()
            .into_shape_with_order((1, self.abundances.ncols()))
            .expect("reshape");
        Cube::new(row, self.width, self.height, vec![1.0])
    }
}

pub fn spectral_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 180.0;
    }
    let c = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Wax-Kailath MDL over the eigenvalues of the sample second moment:
/// the code length `L (M-k) ln(arith/geo mean of the noise eigenvalues)` plus
/// the parameter-count penalty `k (2M - k) ln(L) / 2`, minimized over `k`.
/// Returns the minimizing model order (0 for white noise).
pub fn estimate_order_mdl(y: &Cube<f64>, n_max: usize) -> Result<usize> {
    let (m, l) = y.data().dim();
    if n_max < 1 || n_max > m {
        return Err(Error::InvalidSpec(format!(
            "n_max {n_max} out of range 1..={m}"
        )));
    }
    if l <= m {
        return Err(Error::RankDeficient(format!(
            "need more pixels ({l}) than bands ({m})"
        )));
    }
    let data = y.data();
    let r = data.dot(&data.t()) / l as f64;
    let (mut evals, _) = sym_eig(&r)?;
    let top = evals[0].max(0.0);
    if !(top > 0.0) {
        return Err(Error::RankDeficient("all-zero data".into()));
    }
    // floor tiny/negative eigenvalues so noiseless low-rank data behaves
    let floor = top * 1e-12;
    for v in evals.iter_mut() {
        *v = v.max(floor);
    }
    let ln_l = (l as f64).ln();
    let kmax = n_max.min(m - 1);
    let mut best_k = 0usize;
    let mut best = f64::INFINITY;
    for k in 0..=kmax {
        let tail = &evals[k..];
        let count = tail.len() as f64;
        let arith = tail.iter().sum::<f64>() / count;
        let ln_geo = tail.iter().map(|v| v.ln()).sum::<f64>() / count;
        let code = l as f64 * count * (arith.ln() - ln_geo);
        let penalty = 0.5 * (k * (2 * m - k)) as f64 * ln_l;
        let mdl = code + penalty;
        if mdl < best {
            best = mdl;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Vertex component analysis endmember extraction.
#[derive(Debug, Clone)]
pub struct VcaResult {
    /// `M x N` spectra; always actual pixel columns of the input.
    pub endmembers: Array2<f64>,
    /// Selected pixel indices, in extraction order.
    pub indices: Vec<usize>,
}

/// Extract `n` endmembers as extreme pixels under random orthogonal
/// projections, after an SNR-dependent subspace projection. Deterministic
/// given the seed; projection ties break toward the lowest pixel index.
pub fn vca(y: &Cube<f64>, n: usize, seed: u64) -> Result<VcaResult> {
    let (m, l) = y.data().dim();
    if n < 1 || n > m.min(l) {
        return Err(Error::InvalidSpec(format!(
            "n = {n} out of range 1..={}",
            m.min(l)
        )));
    }
    let data = y.data();
    let all_same = (1..l).all(|px| (0..m).all(|b| data[[b, px]] == data[[b, 0]]));
    if all_same {
        return Err(Error::DegenerateData("all pixels identical".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mean = data.mean_axis(Axis(1)).expect("nonempty");
    let centered = data - &mean.clone().insert_axis(Axis(1));
    let cov = centered.dot(&centered.t()) / l as f64;
    let (_, evecs_c) = sym_eig(&cov)?;

    // SNR estimate from the n-dimensional signal-subspace projection
    let p_y = data.iter().map(|v| v * v).sum::<f64>() / l as f64;
    let ud_n = evecs_c.slice(ndarray::s![.., 0..n]).to_owned();
    let xp = ud_n.t().dot(&centered);
    let p_x = xp.iter().map(|v| v * v).sum::<f64>() / l as f64 + mean.dot(&mean);
    let snr = if p_y > p_x {
        let num = p_x - (n as f64 / m as f64) * p_y;
        if num <= 0.0 {
            f64::NEG_INFINITY
        } else {
            10.0 * (num / (p_y - p_x)).log10()
        }
    } else {
        f64::INFINITY
    };
    let snr_threshold = 15.0 + 10.0 * (n as f64).log10();

    // Projected data the extraction loop works on (n rows).
    let yproj: Array2<f64> = if snr > snr_threshold {
        // projective projection onto the simplex-affine hyperplane
        let r2 = data.dot(&data.t()) / l as f64;
        let (_, evecs) = sym_eig(&r2)?;
        let ud = evecs.slice(ndarray::s![.., 0..n]).to_owned();
        let x = ud.t().dot(data);
        let u = x.mean_axis(Axis(1)).expect("nonempty");
        let mut out = Array2::<f64>::zeros((n, l));
        for px in 0..l {
            let denom = x.column(px).dot(&u);
            let denom = if denom.abs() < 1e-12 { 1e-12 } else { denom };
            for row in 0..n {
                out[[row, px]] = x[[row, px]] / denom;
            }
        }
        out
    } else {
        // low-SNR branch: d = n-1 principal components plus a constant row
        let d = (n - 1).max(1);
        let ud = evecs_c.slice(ndarray::s![.., 0..d]).to_owned();
        let x = ud.t().dot(&centered);
        let c = (0..l)
            .map(|px| x.column(px).dot(&x.column(px)).sqrt())
            .fold(0.0f64, f64::max);
        let rows = if n > 1 { n } else { 2 };
        let mut out = Array2::<f64>::zeros((rows, l));
        for row in 0..d {
            for px in 0..l {
                out[[row, px]] = x[[row, px]];
            }
        }
        for px in 0..l {
            out[[rows - 1, px]] = c;
        }
        out.slice(ndarray::s![0..n.max(1), ..]).to_owned()
    };

    let dim = yproj.nrows();
    let mut a = Array2::<f64>::zeros((dim, n));
    a[[dim - 1, 0]] = 1.0;
    let mut indices = Vec::with_capacity(n);
    for i in 0..n {
        // random direction orthogonal to the span of the current columns
        let mut f = Array1::<f64>::zeros(dim);
        for _attempt in 0..64 {
            let w = Array1::from_shape_fn(dim, |_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            });
            f = orthogonal_component(&a, i.max(1), &w);
            let norm = f.dot(&f).sqrt();
            if norm > 1e-12 {
                f.mapv_inplace(|v| v / norm);
                break;
            }
        }
        let mut best_px = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for px in 0..l {
            let v = f.dot(&yproj.column(px)).abs();
            if v > best_val {
                best_val = v;
                best_px = px;
            }
        }
        indices.push(best_px);
        for row in 0..dim {
            a[[row, i]] = yproj[[row, best_px]];
        }
    }

    let mut endmembers = Array2::<f64>::zeros((m, n));
    for (col, &px) in indices.iter().enumerate() {
        for band in 0..m {
            endmembers[[band, col]] = data[[band, px]];
        }
    }
    Ok(VcaResult {
        endmembers,
        indices,
    })
}

/// `w - Q Q^T w` where `Q` spans the first `cols` columns of `a`
/// (Gram-Schmidt; rank-deficient columns are skipped).
fn orthogonal_component(a: &Array2<f64>, cols: usize, w: &Array1<f64>) -> Array1<f64> {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for c in 0..cols {
        let mut v = a.column(c).to_owned();
        for q in &basis {
            let proj = v.dot(q);
            v = &v - &(q * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            basis.push(v / norm);
        }
    }
    let mut f = w.clone();
    for q in &basis {
        let proj = f.dot(q);
        f = &f - &(q * proj);
    }
    f
}

/// Fully constrained least squares for one pixel: minimize `||E a - y||^2`
/// subject to `a >= 0`, `sum a = 1`, via an active-set method on the simplex.
fn fcls_pixel(
    gram: &Array2<f64>,
    ety: &Array1<f64>,
    tol: f64,
) -> Result<Array1<f64>> {
    let n = gram.nrows();
    if n == 1 {
        return Ok(Array1::from_elem(1, 1.0));
    }
    let mut passive = vec![true; n];
    let mut a = Array1::from_elem(n, 1.0 / n as f64);
    let max_iter = 60 * n.max(4);
    for _ in 0..max_iter {
        let idx: Vec<usize> = (0..n).filter(|i| passive[*i]).collect();
        let k = idx.len();
        if k == 0 {
            return Err(Error::RankDeficient("FCLS emptied the passive set".into()));
        }
        // equality-constrained LS on the passive set (KKT system)
        let mut kkt = Array2::<f64>::zeros((k + 1, k + 1));
        let mut rhs = Array1::<f64>::zeros(k + 1);
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                kkt[[r, c]] = 2.0 * gram[[i, j]];
            }
            kkt[[r, k]] = 1.0;
            kkt[[k, r]] = 1.0;
            rhs[r] = 2.0 * ety[i];
        }
        rhs[k] = 1.0;
        let sol = solve_vec(&kkt, &rhs)
            .map_err(|_| Error::RankDeficient("singular FCLS KKT system".into()))?;
        let mut a_new = Array1::<f64>::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            a_new[i] = sol[r];
        }
        let nu = sol[k];

        let min_passive = idx.iter().map(|&i| a_new[i]).fold(f64::INFINITY, f64::min);
        if min_passive < -tol {
            // step toward a_new until the first passive variable hits zero
            let mut alpha = 1.0f64;
            let mut blocker = None;
            for &i in &idx {
                if a_new[i] < -tol && a[i] - a_new[i] > 0.0 {
                    let step = a[i] / (a[i] - a_new[i]);
                    if step < alpha {
                        alpha = step;
                        blocker = Some(i);
                    }
                }
            }
            for i in 0..n {
                a[i] += alpha * (a_new[i] - a[i]);
            }
            if let Some(i) = blocker {
                a[i] = 0.0;
                passive[i] = false;
            } else {
                // numerical corner: accept the clipped point
                for i in 0..n {
                    if a[i] < 0.0 {
                        a[i] = 0.0;
                        passive[i] = false;
                    }
                }
            }
            continue;
        }

        a = a_new;
        // dual feasibility on the active set
        let ga = gram.dot(&a);
        let mut worst = -tol;
        let mut worst_i = None;
        for i in 0..n {
            if !passive[i] {
                let lambda = 2.0 * (ga[i] - ety[i]) + nu;
                if lambda < worst {
                    worst = lambda;
                    worst_i = Some(i);
                }
            }
        }
        match worst_i {
            None => return Ok(a),
            Some(i) => passive[i] = true,
        }
    }
    Err(Error::RankDeficient("FCLS active set did not settle".into()))
}

/// Abundance estimation for every pixel against the given endmembers.
/// Outputs satisfy the simplex constraints to 1e-9.
pub fn fcls(y: &Cube<f64>, endmembers: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, l) = y.data().dim();
    if endmembers.nrows() != m {
        return Err(Error::ShapeMismatch(format!(
            "endmembers have {} bands, cube has {m}",
            endmembers.nrows()
        )));
    }
    let n = endmembers.ncols();
    let gram = endmembers.t().dot(endmembers);
    // full column rank check via the Gram matrix
    let (evals, _) = sym_eig(&gram)?;
    let rank_ok = evals.last().map(|v| *v > 1e-12 * evals[0].max(1e-300)).unwrap_or(false);
    if !rank_ok {
        return Err(Error::RankDeficient(
            "endmember matrix is not full column rank".into(),
        ));
    }
    let tol = 1e-9;
    let cols: Result<Vec<Array1<f64>>> = (0..l)
        .into_par_iter()
        .map(|px| {
            let ety = endmembers.t().dot(&y.data().column(px));
            fcls_pixel(&gram, &ety, tol)
        })
        .collect();
    let cols = cols?;
    let mut out = Array2::<f64>::zeros((n, l));
    for (px, col) in cols.into_iter().enumerate() {
        for (s, v) in col.iter().enumerate() {
            // snap the active-set zeros exactly
            out[[s, px]] = v.max(0.0);
        }
    }
    Ok(out)
}

/// Full unmixing pipeline: model order (MDL unless given), VCA endmembers,
/// FCLS abundances.
pub fn unmix(y: &Cube<f64>, n_opt: Option<usize>, seed: u64, n_max: usize) -> Result<UnmixResult> {
    let n = match n_opt {
        Some(n) => n,
        None => {
            let est = estimate_order_mdl(y, n_max)?;
            est.max(1)
        }
    };
    let extraction = vca(y, n, seed)?;
    let abundances = fcls(y, &extraction.endmembers)?;
    let result = UnmixResult {
        n_sources: n,
        endmembers: extraction.endmembers,
        abundances,
        width: y.width(),
        height: y.height(),
    };
    result.validate()?;
    Ok(result)
}

/// Greedy-free exact matching of extracted endmembers to references:
/// minimizes the summed spectral angle over all permutations (N is small).
pub fn match_endmembers(extracted: &Array2<f64>, reference: &Array2<f64>) -> Vec<usize> {
    let n = extracted.ncols();
    let mut angles = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let a: Vec<f64> = extracted.column(i).to_vec();
            let b: Vec<f64> = reference.column(j).to_vec();
            angles[i][j] = spectral_angle_deg(&a, &b);
        }
    }
    let mut best_perm: Vec<usize> = (0..n).collect();
    let mut best_cost = f64::INFINITY;
    let mut perm: Vec<usize> = (0..n).collect();
    permute_search(&mut perm, 0, &angles, &mut best_cost, &mut best_perm);
    best_perm
}

fn permute_search(
    perm: &mut Vec<usize>,
    k: usize,
    angles: &[Vec<f64>],
    best_cost: &mut f64,
    best_perm: &mut Vec<usize>,
) {
    let n = perm.len();
    if k == n {
        let cost: f64 = (0..n).map(|i| angles[i][perm[i]]).sum();
        if cost < *best_cost {
            *best_cost = cost;
            *best_perm = perm.clone();
        }
        return;
    }
    for i in k..n {
        perm.swap(k, i);
        permute_search(perm, k + 1, angles, best_cost, best_perm);
        perm.swap(k, i);
    }
}
