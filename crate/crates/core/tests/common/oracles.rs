//! Brute-force references written without the crate's kernels.

use lodisc::eval::RetrievalResult;

fn unit(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / n).collect()
}

/// Mean over `i` of `−log(exp(s_ii) / Σ_j exp(s_ij))` with `s = cos / τ`,
/// summed naively in f64.
pub fn info_nce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
    let (qn, kn): (Vec<_>, Vec<_>) = (q.iter().map(|r| unit(r)).collect(), k.iter().map(|r| unit(r)).collect());
    let b = q.len();
    let mut total = 0.0;
    for i in 0..b {
        let s: Vec<f64> = (0..b)
            .map(|j| qn[i].iter().zip(&kn[j]).map(|(a, c)| a * c).sum::<f64>() / tau)
            .collect();
        let denom: f64 = s.iter().map(|v| v.exp()).sum();
        total -= (s[i].exp() / denom).ln();
    }
    total / b as f64
}

pub fn symmetric(q1: &[Vec<f64>], q2: &[Vec<f64>], k1: &[Vec<f64>], k2: &[Vec<f64>], tau: f64) -> f64 {
    2.0 * tau * (info_nce(q1, k2, tau) + info_nce(q2, k1, tau))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let norm = |r: &[f32]| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    let (na, nb) = (norm(a), norm(b));
    a.iter().zip(b).map(|(&x, &y)| (x as f64 / na) * (y as f64 / nb)).sum()
}

/// Ranks every gallery item by counting the items that beat it: a strictly
/// higher similarity, or an equal one at a lower index.
pub fn retrieval(
    queries: &[Vec<f32>],
    query_labels: &[usize],
    gallery: &[Vec<f32>],
    gallery_labels: &[usize],
    same_bank: bool,
) -> RetrievalResult {
    let (mut r1, mut r5, mut ap_sum) = (0.0, 0.0, 0.0);
    let (mut excluded, mut evaluated) = (0, 0);
    for (i, q) in queries.iter().enumerate() {
        let cands: Vec<usize> = (0..gallery.len()).filter(|&j| !(same_bank && j == i)).collect();
        let sim: Vec<f64> = cands.iter().map(|&j| cosine(q, &gallery[j])).collect();
        let rank_of = |a: usize| {
            (0..cands.len())
                .filter(|&b| sim[b] > sim[a] || (sim[b] == sim[a] && cands[b] < cands[a]))
                .count()
                + 1
        };
        let mut relevant_ranks: Vec<usize> = (0..cands.len())
            .filter(|&a| gallery_labels[cands[a]] == query_labels[i])
            .map(rank_of)
            .collect();
        if relevant_ranks.is_empty() {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        relevant_ranks.sort_unstable();
        r1 += f64::from(u8::from(relevant_ranks[0] == 1));
        r5 += f64::from(u8::from(relevant_ranks[0] <= 5));
        let ap: f64 = relevant_ranks
            .iter()
            .enumerate()
            .map(|(hits, &rank)| (hits + 1) as f64 / rank as f64)
            .sum();
        ap_sum += ap / relevant_ranks.len() as f64;
    }
    let n = evaluated.max(1) as f64;
    RetrievalResult {
        rank1: r1 / n,
        rank5: r5 / n,
        map: ap_sum / n,
        excluded_queries: excluded,
        evaluated_queries: evaluated,
        empty: evaluated == 0,
    }
}
