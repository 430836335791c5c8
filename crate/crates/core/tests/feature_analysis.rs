use defectdiff_core::feature_analysis::{tsne, TsneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two isotropic Gaussian clusters in `dim` dimensions, centres 10 apart.
fn two_clusters(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let offset = if c == 0 { -5.0 / (dim as f64).sqrt() } else { 5.0 / (dim as f64).sqrt() };
        rows.push((0..dim).map(|_| offset + noise.sample(&mut rng)).collect());
        ids.push(c);
    }
    (rows, ids)
}

/// Mean silhouette coefficient under Euclidean distance.
fn silhouette(points: &[Vec<f64>], ids: &[usize]) -> f64 {
    let dist = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let k = ids.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..points.len() {
            if i != j {
                sums[ids[j]] += dist(&points[i], &points[j]);
                counts[ids[j]] += 1;
            }
        }
        let a = sums[ids[i]] / counts[ids[i]] as f64;
        let b = (0..k).filter(|&c| c != ids[i]).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}

#[test]
fn separated_clusters_embed_with_high_silhouette() {
    let (rows, ids) = two_clusters(200, 64, 1);
    let cfg = TsneConfig::default();
    let y = tsne(&rows, &cfg).unwrap();
    let s = silhouette(&y, &ids);
    assert!(s > 0.5, "silhouette {s}");
    assert_eq!(y, tsne(&rows, &cfg).unwrap());
}

#[test]
fn permuting_rows_permutes_embedding() {
    let (rows, _) = two_clusters(60, 8, 2);
    let cfg = TsneConfig {
        perplexity: 10.0,
        iterations: 300,
        ..Default::default()
    };
    let y = tsne(&rows, &cfg).unwrap();
    let perm: Vec<usize> = (0..rows.len()).rev().collect();
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let yp = tsne(&permuted, &cfg).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(yp[k], y[i], "row {i}");
    }
}

#[test]
fn perplexity_guard() {
    let (rows, _) = two_clusters(50, 4, 3);
    assert!(tsne(&rows, &TsneConfig::default()).is_err());
    assert!(tsne(&rows[..], &TsneConfig { perplexity: 16.0, iterations: 10, ..Default::default() }).is_ok());
}
