//! Straight-line scalar transcription of the classifier's evaluation-mode
//! forward pass, reading weights by name. Shares no code with the library
//! beyond the parameter store.
#![allow(dead_code)]

use saaformer::layers::ParamStore;

const EPS: f64 = 1e-5;

/// `[h][w][c]`
pub type Map = Vec<Vec<Vec<f64>>>;

pub fn weights(store: &ParamStore, name: &str) -> Vec<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.get(id).data().to_vec()
}

fn has(store: &ParamStore, name: &str) -> bool {
    store.find(name).is_some()
}

/// `w` is `[out][in]` row-major.
pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let inputs = x.len();
    let outputs = w.len() / inputs;
    (0..outputs)
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b[o]);
            for i in 0..inputs {
                s += w[o * inputs + i] * x[i];
            }
            s
        })
        .collect()
}

fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = weights(store, &format!("{name}.weight"));
    let bias_name = format!("{name}.bias");
    let b = has(store, &bias_name).then(|| weights(store, &bias_name));
    affine(x, &w, b.as_deref())
}

fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let scale = weights(store, &format!("{name}.scale"));
    let shift = weights(store, &format!("{name}.shift"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + EPS).sqrt() * scale[i] + shift[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn map_pixels(x: &Map, f: impl Fn(&[f64]) -> Vec<f64>) -> Map {
    x.iter().map(|row| row.iter().map(|p| f(p)).collect()).collect()
}

fn add(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(pa, pb)| pa.iter().zip(pb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

fn channels(x: &Map, start: usize, len: usize) -> Map {
    map_pixels(x, |p| p[start..start + len].to_vec())
}

fn join(parts: &[Map]) -> Map {
    let (h, w) = (parts[0].len(), parts[0][0].len());
    (0..h)
        .map(|i| (0..w).map(|j| parts.iter().flat_map(|p| p[i][j].clone()).collect()).collect())
        .collect()
}

/// One axis of attention: `q`, `k`, `v` are `[len][dim]` already biased.
fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let len = q.len();
    let dim = q[0].len();
    let d = dim / heads;
    let mut out = vec![vec![0.0; dim]; len];
    for hd in 0..heads {
        let lo = hd * d;
        for i in 0..len {
            let logits: Vec<f64> = (0..len)
                .map(|p| (lo..lo + d).map(|t| q[i][t] * k[p][t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for p in 0..len {
                for t in lo..lo + d {
                    out[i][t] += e[p] / z * v[p][t];
                }
            }
        }
    }
    out
}

/// Positional-aware axial aggregation attention, output projection
/// included, on one `h × w × c` sample.
pub fn attention(store: &ParamStore, name: &str, x: &Map, heads: usize) -> Map {
    let (h, w) = (x.len(), x[0].len());
    let q = map_pixels(x, |p| linear(store, &format!("{name}.query"), p));
    let k = map_pixels(x, |p| linear(store, &format!("{name}.key"), p));
    let v = map_pixels(x, |p| linear(store, &format!("{name}.value"), p));
    let dim = q[0][0].len();
    let table = |suffix: &str, idx: usize| -> Vec<f64> {
        weights(store, &format!("{name}.{suffix}"))[idx * dim..(idx + 1) * dim].to_vec()
    };
    let row_max = |t: &Map, i: usize| -> Vec<f64> {
        (0..dim).map(|c| (0..w).map(|j| t[i][j][c]).fold(f64::NEG_INFINITY, f64::max)).collect()
    };
    let col_max = |t: &Map, j: usize| -> Vec<f64> {
        (0..dim).map(|c| (0..h).map(|i| t[i][j][c]).fold(f64::NEG_INFINITY, f64::max)).collect()
    };
    let plus = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> { a.iter().zip(&b).map(|(x, y)| x + y).collect() };
    let rq: Vec<_> = (0..h).map(|i| plus(row_max(&q, i), table("row_q", i))).collect();
    let rk: Vec<_> = (0..h).map(|i| plus(row_max(&k, i), table("row_k", i))).collect();
    let rv: Vec<_> = (0..h).map(|i| plus(row_max(&v, i), table("row_v", i))).collect();
    let cq: Vec<_> = (0..w).map(|j| plus(col_max(&q, j), table("col_q", j))).collect();
    let ck: Vec<_> = (0..w).map(|j| plus(col_max(&k, j), table("col_k", j))).collect();
    let cv: Vec<_> = (0..w).map(|j| plus(col_max(&v, j), table("col_v", j))).collect();
    let row_out = attend(&rq, &rk, &rv, heads);
    let col_out = attend(&cq, &ck, &cv, heads);
    (0..h)
        .map(|i| {
            (0..w)
                .map(|j| linear(store, &format!("{name}.output"), &plus(row_out[i].clone(), col_out[j].clone())))
                .collect()
        })
        .collect()
}

/// Zero-padded 3×3 cross-correlation (no bias) then batch norm with running
/// statistics.
pub fn aux_path(store: &ParamStore, name: &str, x: &Map) -> Map {
    let (h, w, c) = (x.len(), x[0].len(), x[0][0].len());
    let kernel = weights(store, &format!("{name}.aux_conv.kernel"));
    let cout = kernel.len() / (9 * c);
    let mean = weights(store, &format!("{name}.aux_norm.running_mean"));
    let var = weights(store, &format!("{name}.aux_norm.running_var"));
    let scale = weights(store, &format!("{name}.aux_norm.scale"));
    let shift = weights(store, &format!("{name}.aux_norm.shift"));
    let mut out = vec![vec![vec![0.0; cout]; w]; h];
    for i in 0..h {
        for j in 0..w {
            for o in 0..cout {
                let mut s = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (y, z) = (i as i64 + di as i64 - 1, j as i64 + dj as i64 - 1);
                        if y < 0 || z < 0 || y >= h as i64 || z >= w as i64 {
                            continue;
                        }
                        for ci in 0..c {
                            s += x[y as usize][z as usize][ci] * kernel[((di * 3 + dj) * c + ci) * cout + o];
                        }
                    }
                }
                out[i][j][o] = (s - mean[o]) / (var[o] + EPS).sqrt() * scale[o] + shift[o];
            }
        }
    }
    out
}

fn unit(store: &ParamStore, name: &str, x: &Map, heads: usize) -> Map {
    let normed = map_pixels(x, |p| layer_norm(store, &format!("{name}.attn_norm"), p));
    let attn = attention(store, &format!("{name}.attn"), &normed, heads);
    let aux = aux_path(store, &format!("{name}.attn"), &normed);
    let y = add(x, &add(&attn, &aux));
    let ffn = map_pixels(&y, |p| {
        let n = layer_norm(store, &format!("{name}.ffn_norm"), p);
        let hidden: Vec<f64> = linear(store, &format!("{name}.ffn_in"), &n).into_iter().map(gelu).collect();
        linear(store, &format!("{name}.ffn_out"), &hidden)
    });
    add(&y, &ffn)
}

/// Channel `i` of the result is channel `(i + by) mod C` of `x`.
fn rotate(x: &Map, by: usize) -> Map {
    map_pixels(x, |p| (0..p.len()).map(|i| p[(i + by) % p.len()]).collect())
}

fn level(store: &ParamStore, name: &str, x: &Map, c: usize, heads: usize) -> Map {
    let embed = x[0][0].len();
    let parts = embed / c;
    let regular: Vec<Map> = (0..parts)
        .map(|i| unit(store, &format!("{name}.regular{i}"), &channels(x, i * c, c), heads))
        .collect();
    let y = join(&regular);
    let s = rotate(&y, c / 2);
    let mut shifted: Vec<Map> = (0..parts - 1)
        .map(|i| unit(store, &format!("{name}.shifted{i}"), &channels(&s, i * c, c), heads))
        .collect();
    let start = (parts - 1) * c;
    shifted.push(unit(store, &format!("{name}.shifted{}", parts - 1), &channels(&s, start, c / 2), heads));
    shifted.push(unit(store, &format!("{name}.shifted{parts}"), &channels(&s, start + c / 2, c / 2), heads));
    rotate(&join(&shifted), embed - c / 2)
}

/// Multi-level block: every level on `x`, averaged, layer-normalised.
pub fn multi_level(store: &ParamStore, name: &str, x: &Map, levels: &[usize], heads: usize) -> Map {
    let outs: Vec<Map> = levels
        .iter()
        .enumerate()
        .map(|(l, &c)| level(store, &format!("{name}.level{l}"), x, c, heads))
        .collect();
    let mut sum = outs[0].clone();
    for o in &outs[1..] {
        sum = add(&sum, o);
    }
    let inv = 1.0 / levels.len() as f64;
    map_pixels(&sum, |p| {
        let mean: Vec<f64> = p.iter().map(|v| v * inv).collect();
        layer_norm(store, &format!("{name}.fusion_norm"), &mean)
    })
}

/// Logits of one `p × p × C_in` sample.
pub fn classifier(store: &ParamStore, x: &Map, depth: usize, levels: &[usize], heads: usize) -> Vec<f64> {
    let mut f = map_pixels(x, |p| linear(store, "embed", p));
    for d in 0..depth {
        f = multi_level(store, &format!("depth{d}"), &f, levels, heads);
    }
    let f = map_pixels(&f, |p| layer_norm(store, "head_norm", p));
    let count = (f.len() * f[0].len()) as f64;
    let embed = f[0][0].len();
    let pooled: Vec<f64> = (0..embed)
        .map(|c| f.iter().flatten().map(|p| p[c]).sum::<f64>() / count)
        .collect();
    linear(store, "head", &pooled)
}

/// `[N, h, w, c]` flat data to per-sample maps.
pub fn to_maps(data: &[f64], n: usize, h: usize, w: usize, c: usize) -> Vec<Map> {
    (0..n)
        .map(|s| {
            (0..h)
                .map(|i| (0..w).map(|j| data[((s * h + i) * w + j) * c..((s * h + i) * w + j + 1) * c].to_vec()).collect())
                .collect()
        })
        .collect()
}
