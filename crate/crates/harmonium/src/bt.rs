//! Bradley-Terry global ranking from pairwise preference counts.
//!
//! Strengths are fitted by minorization-maximization, which ascends the
//! likelihood monotonically without step-size tuning. Scores are reported
//! as zero-mean log-strengths; adding a constant to all log-strengths
//! leaves every pairwise probability unchanged, so the zero-mean
//! representative is the unique reported one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Win-count matrix over methods; `wins[i][j]` counts how often method
/// `i` was preferred over method `j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairwiseResults {
    pub methods: Vec<String>,
    pub wins: Vec<Vec<u64>>,
}

impl PairwiseResults {
    pub fn new(methods: Vec<String>, wins: Vec<Vec<u64>>) -> Result<Self> {
        let k = methods.len();
        if wins.len() != k || wins.iter().any(|row| row.len() != k) {
            return Err(Error::Shape(format!(
                "win matrix must be {k}x{k} to match {k} methods"
            )));
        }
        for (i, row) in wins.iter().enumerate() {
            if row[i] != 0 {
                return Err(Error::Data(format!(
                    "diagonal entry wins[{i}][{i}] = {} must be zero",
                    row[i]
                )));
            }
        }
        let mut seen = BTreeMap::new();
        for (i, m) in methods.iter().enumerate() {
            if let Some(prev) = seen.insert(m.clone(), i) {
                return Err(Error::Data(format!(
                    "method {m:?} appears at positions {prev} and {i}"
                )));
            }
        }
        Ok(Self { methods, wins })
    }

    /// Accumulates `(winner, loser)` rows; methods are indexed in order
    /// of first appearance.
    pub fn from_rows(rows: &[(String, String)]) -> Result<Self> {
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut methods = Vec::new();
        let mut idx_of = |name: &str, methods: &mut Vec<String>| -> usize {
            if let Some(&i) = index.get(name) {
                i
            } else {
                let i = methods.len();
                methods.push(name.to_string());
                index.insert(name.to_string(), i);
                i
            }
        };
        let mut pairs = Vec::new();
        for (winner, loser) in rows {
            if winner == loser {
                return Err(Error::Data(format!(
                    "row has identical winner and loser {winner:?}"
                )));
            }
            let w = idx_of(winner, &mut methods);
            let l = idx_of(loser, &mut methods);
            pairs.push((w, l));
        }
        let k = methods.len();
        let mut wins = vec![vec![0u64; k]; k];
        for (w, l) in pairs {
            wins[w][l] += 1;
        }
        Self::new(methods, wins)
    }

    /// Loads either a `winner,loser` CSV (optional header) or a JSON
    /// object `{methods, wins}` depending on the file contents.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            let parsed: PairwiseResults = serde_json::from_str(&text)?;
            Self::new(parsed.methods, parsed.wins)
        } else {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_reader(text.as_bytes());
            let mut rows = Vec::new();
            for record in reader.records() {
                let record = record?;
                if record.len() != 2 {
                    return Err(Error::Data(format!(
                        "expected winner,loser rows, got {} fields",
                        record.len()
                    )));
                }
                let (w, l) = (record[0].trim().to_string(), record[1].trim().to_string());
                if w == "winner" && l == "loser" {
                    continue; // header row
                }
                rows.push((w, l));
            }
            Self::from_rows(&rows)
        }
    }

    fn k(&self) -> usize {
        self.methods.len()
    }
}

/// Fitted zero-mean log-strengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BtScores {
    pub methods: Vec<String>,
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration log-likelihood; non-decreasing by construction of
    /// the MM update.
    pub log_likelihood: Vec<f64>,
}

/// Maximizes the Bradley-Terry likelihood with `prior` pseudo-wins added
/// to every ordered pair, via MM iteration. Convergence is declared when
/// the max change of any log-strength drops below `tol`.
pub fn fit_bt(
    results: &PairwiseResults,
    max_iters: usize,
    tol: f64,
    prior: f64,
) -> Result<BtScores> {
    let k = results.k();
    if k < 2 {
        return Err(Error::Precondition(format!(
            "ranking needs at least two methods, got {k}"
        )));
    }
    if !(prior >= 0.0) {
        return Err(Error::Config(format!("prior must be nonnegative, got {prior}")));
    }

    // Effective counts with pseudo-wins.
    let eff = |i: usize, j: usize| results.wins[i][j] as f64 + prior;

    if !strongly_connected(results, prior) {
        return Err(Error::Precondition(
            "comparison graph is not strongly connected; every method must win and lose \
             along some chain (a positive prior guarantees this)"
                .into(),
        ));
    }

    let total_wins: Vec<f64> = (0..k)
        .map(|i| (0..k).filter(|&j| j != i).map(|j| eff(i, j)).sum())
        .collect();

    let log_lik = |p: &[f64]| -> f64 {
        let mut ll = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j && eff(i, j) > 0.0 {
                    ll += eff(i, j) * (p[i].ln() - (p[i] + p[j]).ln());
                }
            }
        }
        ll
    };

    let mut strengths = vec![1.0; k];
    let mut trajectory = vec![log_lik(&strengths)];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..max_iters {
        iterations = iter + 1;
        let mut next = vec![0.0; k];
        for i in 0..k {
            let mut denom = 0.0;
            for j in 0..k {
                if j != i {
                    let n_ij = eff(i, j) + eff(j, i);
                    if n_ij > 0.0 {
                        denom += n_ij / (strengths[i] + strengths[j]);
                    }
                }
            }
            next[i] = total_wins[i] / denom;
        }
        // Re-center at geometric mean 1 so log-strengths stay zero-mean.
        let log_gm = next.iter().map(|p| p.ln()).sum::<f64>() / k as f64;
        for p in next.iter_mut() {
            *p /= log_gm.exp();
        }

        let max_change = strengths
            .iter()
            .zip(&next)
            .map(|(a, b)| (a.ln() - b.ln()).abs())
            .fold(0.0, f64::max);

        strengths = next;
        let ll = log_lik(&strengths);
        debug_assert!(
            ll >= trajectory.last().unwrap() - 1e-9,
            "MM likelihood decreased: {} -> {ll}",
            trajectory.last().unwrap()
        );
        trajectory.push(ll);

        if max_change < tol {
            converged = true;
            break;
        }
    }

    let mut scores: Vec<f64> = strengths.iter().map(|p| p.ln()).collect();
    let mean = scores.iter().sum::<f64>() / k as f64;
    for s in scores.iter_mut() {
        *s -= mean;
    }
    if converged && scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("fitted scores are not finite".into()));
    }

    Ok(BtScores {
        methods: results.methods.clone(),
        scores,
        iterations,
        converged,
        log_likelihood: trajectory,
    })
}

/// Strong connectivity of the directed win graph (edge i -> j when the
/// effective count of i over j is positive); the condition for a finite
/// maximum-likelihood solution.
fn strongly_connected(results: &PairwiseResults, prior: f64) -> bool {
    let k = results.k();
    let edge = |i: usize, j: usize| results.wins[i][j] as f64 + prior > 0.0;
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..k {
                let connected = if forward { edge(u, v) } else { edge(v, u) };
                if v != u && connected && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    };
    reach(true) == k && reach(false) == k
}

/// One ranked row of the report.
#[derive(Debug, Clone, Serialize)]
pub struct RankedMethod {
    pub rank: usize,
    pub method: String,
    pub score: f64,
}

/// Methods sorted descending by score, ties broken by name.
pub fn rank_report(scores: &BtScores) -> Vec<RankedMethod> {
    let mut rows: Vec<(&String, f64)> = scores
        .methods
        .iter()
        .zip(scores.scores.iter().copied())
        .collect();
    rows.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    rows.into_iter()
        .enumerate()
        .map(|(i, (method, score))| RankedMethod {
            rank: i + 1,
            method: method.clone(),
            score,
        })
        .collect()
}

pub fn format_csv(table: &[RankedMethod]) -> String {
    let mut s = String::from("rank,method,score\n");
    for row in table {
        s.push_str(&format!("{},{},{}\n", row.rank, row.method, row.score));
    }
    s
}

pub fn format_markdown(table: &[RankedMethod]) -> String {
    let mut s = String::from("| rank | method | score |\n|---:|---|---:|\n");
    for row in table {
        s.push_str(&format!(
            "| {} | {} | {:.4} |\n",
            row.rank, row.method, row.score
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_methods(w01: u64, w10: u64) -> PairwiseResults {
        PairwiseResults::new(
            vec!["a".into(), "b".into()],
            vec![vec![0, w01], vec![w10, 0]],
        )
        .unwrap()
    }

    #[test]
    fn two_item_closed_form() {
        // p_a / p_b = 9/1, score gap ln 9, zero-mean split.
        let scores = fit_bt(&two_methods(9, 1), 500, 1e-12, 0.0).unwrap();
        assert!(scores.converged);
        let gap = scores.scores[0] - scores.scores[1];
        assert!((gap - 9.0f64.ln()).abs() <= 1e-6, "gap {gap}");
        assert!((scores.scores[0] - 1.0986122886681098).abs() <= 1e-6);
        assert!((scores.scores[1] + 1.0986122886681098).abs() <= 1e-6);
        assert!(scores.scores.iter().sum::<f64>().abs() <= 1e-9);
    }

    #[test]
    fn symmetric_counts_give_zero_scores() {
        let results = PairwiseResults::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![0, 5, 5], vec![5, 0, 5], vec![5, 5, 0]],
        )
        .unwrap();
        let scores = fit_bt(&results, 500, 1e-12, 0.0).unwrap();
        for s in &scores.scores {
            assert!(s.abs() <= 1e-9, "score {s}");
        }
    }

    #[test]
    fn likelihood_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 5;
        let methods: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
        let mut wins = vec![vec![0u64; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    wins[i][j] = rng.gen_range(0..30);
                }
            }
        }
        let results = PairwiseResults::new(methods, wins).unwrap();
        let scores = fit_bt(&results, 200, 1e-10, 0.1).unwrap();
        for w in scores.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn simulate_and_refit_recovers_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let true_scores: [f64; 6] = [2.5, 1.5, 0.5, -0.5, -1.5, -2.5];
        let k = true_scores.len();
        let methods: Vec<String> = (0..k).map(|i| format!("method_{i}")).collect();
        let mut wins = vec![vec![0u64; k]; k];
        for i in 0..k {
            for j in (i + 1)..k {
                let p_i = 1.0 / (1.0 + (true_scores[j] - true_scores[i]).exp());
                for _ in 0..500 {
                    if rng.gen_bool(p_i) {
                        wins[i][j] += 1;
                    } else {
                        wins[j][i] += 1;
                    }
                }
            }
        }
        let results = PairwiseResults::new(methods.clone(), wins).unwrap();
        let scores = fit_bt(&results, 1000, 1e-10, 0.1).unwrap();
        assert!(scores.converged);

        // Kendall tau = 1: the fitted order matches the generator order.
        let table = rank_report(&scores);
        let got: Vec<&str> = table.iter().map(|r| r.method.as_str()).collect();
        let want: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn count_scaling_leaves_scores_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let k = 4;
        let methods: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
        let mut wins = vec![vec![0u64; k]; k];
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    wins[i][j] = rng.gen_range(1..20);
                }
            }
        }
        let scaled: Vec<Vec<u64>> = wins
            .iter()
            .map(|row| row.iter().map(|w| w * 7).collect())
            .collect();
        let tol = 1e-10;
        let a = fit_bt(&PairwiseResults::new(methods.clone(), wins).unwrap(), 2000, tol, 0.0)
            .unwrap();
        let b = fit_bt(&PairwiseResults::new(methods, scaled).unwrap(), 2000, tol, 0.0).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() <= 100.0 * tol, "{x} vs {y}");
        }
    }

    #[test]
    fn disconnected_graph_without_prior_is_rejected() {
        // Two islands: {a, b} and {c, d} never compared across.
        let results = PairwiseResults::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![
                vec![0, 3, 0, 0],
                vec![2, 0, 0, 0],
                vec![0, 0, 0, 4],
                vec![0, 0, 1, 0],
            ],
        )
        .unwrap();
        assert!(matches!(
            fit_bt(&results, 100, 1e-9, 0.0),
            Err(Error::Precondition(_))
        ));
        // A positive prior repairs it.
        assert!(fit_bt(&results, 100, 1e-9, 0.1).is_ok());
    }

    #[test]
    fn all_losses_without_prior_is_rejected() {
        // b never wins: its strength has no finite maximizer.
        let results = two_methods(9, 0);
        assert!(matches!(
            fit_bt(&results, 100, 1e-9, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fewer_than_two_methods_is_precondition_error() {
        let results = PairwiseResults::new(vec!["solo".into()], vec![vec![0]]).unwrap();
        assert!(matches!(
            fit_bt(&results, 10, 1e-9, 0.1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn report_orders_and_breaks_ties_by_name() {
        let scores = BtScores {
            methods: vec!["beta".into(), "alpha".into(), "gamma".into()],
            scores: vec![0.5, 0.5, -1.0],
            iterations: 1,
            converged: true,
            log_likelihood: vec![0.0],
        };
        let table = rank_report(&scores);
        assert_eq!(table[0].method, "alpha");
        assert_eq!(table[1].method, "beta");
        assert_eq!(table[2].method, "gamma");
        assert_eq!(table[0].rank, 1);
        let csv = format_csv(&table);
        assert!(csv.starts_with("rank,method,score\n1,alpha,0.5\n"));
        let md = format_markdown(&table);
        assert!(md.contains("| 1 | alpha | 0.5000 |"));
    }

    #[test]
    fn csv_and_json_inputs_agree() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("pairs.csv");
        std::fs::write(&csv_path, "winner,loser\nx,y\nx,y\ny,x\nx,z\nz,y\n").unwrap();
        let from_csv = PairwiseResults::load(&csv_path).unwrap();
        assert_eq!(from_csv.methods, vec!["x", "y", "z"]);
        assert_eq!(from_csv.wins[0][1], 2);
        assert_eq!(from_csv.wins[1][0], 1);

        let json_path = dir.path().join("pairs.json");
        std::fs::write(
            &json_path,
            serde_json::to_string(&from_csv).unwrap(),
        )
        .unwrap();
        let from_json = PairwiseResults::load(&json_path).unwrap();
        assert_eq!(from_json.methods, from_csv.methods);
        assert_eq!(from_json.wins, from_csv.wins);
    }

    #[test]
    fn diagonal_must_be_zero() {
        let err = PairwiseResults::new(
            vec!["a".into(), "b".into()],
            vec![vec![1, 2], vec![3, 0]],
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
