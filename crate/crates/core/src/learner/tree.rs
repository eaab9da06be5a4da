//! Single CART-style decision tree used for feature ranking.

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 8,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Node {
    Leaf {
        prediction: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    /// Total weighted Gini impurity decrease attributed to each feature.
    pub importances: Vec<f64>,
    n_features: usize,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> usize {
        assert_eq!(x.len(), self.n_features);
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                Node::Leaf { prediction } => return *prediction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p
        })
        .sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &count) in counts.iter().enumerate() {
        if count > counts[best] {
            best = c;
        }
    }
    best
}

/// Fits a depth-limited Gini tree. Splits are searched over `candidates`
/// only; ties in impurity decrease go to the lower feature index and then
/// the lower threshold, so fitting is deterministic.
pub fn fit_tree(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    candidates: &[usize],
    params: TreeParams,
) -> DecisionTree {
    assert_eq!(x.len(), y.len());
    let n_features = x.first().map(|r| r.len()).unwrap_or(0);
    let mut tree = DecisionTree {
        nodes: Vec::new(),
        importances: vec![0.0; n_features],
        n_features,
    };
    let indices: Vec<usize> = (0..x.len()).collect();
    build(&mut tree, x, y, n_classes, candidates, &params, indices, 0, x.len());
    tree
}

#[allow(clippy::too_many_arguments)]
fn build(
    tree: &mut DecisionTree,
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    candidates: &[usize],
    params: &TreeParams,
    indices: Vec<usize>,
    depth: usize,
    n_total: usize,
) -> usize {
    let mut counts = vec![0usize; n_classes];
    for &i in &indices {
        counts[y[i]] += 1;
    }
    let n = indices.len();
    let node_impurity = gini(&counts, n);
    let leaf = |tree: &mut DecisionTree| {
        tree.nodes.push(Node::Leaf {
            prediction: majority(&counts),
        });
        tree.nodes.len() - 1
    };
    if depth >= params.max_depth || n < 2 * params.min_leaf || node_impurity == 0.0 {
        return leaf(tree);
    }

    let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
    let mut sorted = indices.clone();
    for &feature in candidates {
        sorted.sort_by(|&a, &b| {
            x[a][feature]
                .partial_cmp(&x[b][feature])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut left_counts = vec![0usize; n_classes];
        for p in 1..n {
            left_counts[y[sorted[p - 1]]] += 1;
            let prev = x[sorted[p - 1]][feature];
            let here = x[sorted[p]][feature];
            if prev == here {
                continue;
            }
            let nl = p;
            let nr = n - p;
            if nl < params.min_leaf || nr < params.min_leaf {
                continue;
            }
            let right_counts: Vec<usize> = counts
                .iter()
                .zip(&left_counts)
                .map(|(&c, &l)| c - l)
                .collect();
            let decrease = node_impurity
                - (nl as f64 / n as f64) * gini(&left_counts, nl)
                - (nr as f64 / n as f64) * gini(&right_counts, nr);
            let threshold = 0.5 * (prev + here);
            let better = match best {
                None => decrease > 1e-12,
                Some((bd, _, _)) => decrease > bd + 1e-12,
            };
            if better {
                best = Some((decrease, feature, threshold));
            }
        }
    }

    let Some((decrease, feature, threshold)) = best else {
        return leaf(tree);
    };
    tree.importances[feature] += (n as f64 / n_total as f64) * decrease;

    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
        indices.into_iter().partition(|&i| x[i][feature] <= threshold);
    let node = tree.nodes.len();
    tree.nodes.push(Node::Leaf { prediction: 0 }); // placeholder
    let left = build(tree, x, y, n_classes, candidates, params, left_idx, depth + 1, n_total);
    let right = build(tree, x, y, n_classes, candidates, params, right_idx, depth + 1, n_total);
    tree.nodes[node] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    node
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_a_threshold_rule_perfectly() {
        let x: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0, 0.5]).collect();
        let y: Vec<usize> = (0..100).map(|i| usize::from(i >= 50)).collect();
        let tree = fit_tree(&x, &y, 2, &[0, 1], TreeParams::default());
        assert!(tree.importances[0] > 0.0);
        assert_eq!(tree.importances[1], 0.0);
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(tree.predict(row), label);
        }
    }

    #[test]
    fn min_leaf_prevents_tiny_splits() {
        // Nine samples cannot split under min_leaf = 5.
        let x: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let y = vec![0, 0, 0, 0, 0, 1, 1, 1, 1];
        let tree = fit_tree(&x, &y, 2, &[0], TreeParams::default());
        assert_eq!(tree.nodes.len(), 1);
        assert!(matches!(tree.nodes[0], Node::Leaf { prediction: 0 }));
    }
}
