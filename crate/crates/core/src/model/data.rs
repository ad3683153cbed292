//! Synthetic datasets, non-IID device partitions, and epoch batching.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};

use super::ModelError;
use crate::rng::Stream;

/// Spread of the class-center cloud; sample noise scales with `cluster_spread`.
const CENTER_SCALE: f64 = 3.0;

/// Labeled samples with an 80/20 train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: usize,
    pub n_classes: usize,
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<f64>,
    pub test_y: Vec<usize>,
}

impl Dataset {
    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }

    pub fn train_row(&self, i: usize) -> &[f64] {
        &self.train_x[i * self.dims..(i + 1) * self.dims]
    }

    /// Serialize to the documented CSV container:
    /// line 1 is the header `dims,n_classes,n_train,n_test`, line 2 the four
    /// values, then one `label,f0,f1,...` row per sample, train rows first.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str("dims,n_classes,n_train,n_test\n");
        s.push_str(&format!("{},{},{},{}\n", self.dims, self.n_classes, self.n_train(), self.n_test()));
        let mut emit = |x: &[f64], y: &[usize]| {
            for (i, &label) in y.iter().enumerate() {
                s.push_str(&format!("{label}"));
                for v in &x[i * self.dims..(i + 1) * self.dims] {
                    s.push_str(&format!(",{v}"));
                }
                s.push('\n');
            }
        };
        emit(&self.train_x, &self.train_y);
        emit(&self.test_x, &self.test_y);
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, ModelError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| ModelError::Parse("empty file".into()))?;
        if header.trim() != "dims,n_classes,n_train,n_test" {
            return Err(ModelError::Parse(format!("unexpected header: {header}")));
        }
        let meta: Vec<usize> = lines
            .next()
            .ok_or_else(|| ModelError::Parse("missing size line".into()))?
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| ModelError::Parse(e.to_string())))
            .collect::<Result<_, _>>()?;
        let [dims, n_classes, n_train, n_test] = meta[..] else {
            return Err(ModelError::Parse("size line must have 4 fields".into()));
        };
        let mut xs = Vec::with_capacity((n_train + n_test) * dims);
        let mut ys = Vec::with_capacity(n_train + n_test);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label: usize = fields
                .next()
                .ok_or_else(|| ModelError::Parse("empty row".into()))?
                .trim()
                .parse()
                .map_err(|e: std::num::ParseIntError| ModelError::Parse(e.to_string()))?;
            ys.push(label);
            for f in fields {
                xs.push(f.trim().parse::<f64>().map_err(|e| ModelError::Parse(e.to_string()))?);
            }
        }
        if ys.len() != n_train + n_test || xs.len() != (n_train + n_test) * dims {
            return Err(ModelError::Parse("row count does not match header".into()));
        }
        let test_x = xs.split_off(n_train * dims);
        let test_y = ys.split_off(n_train);
        Ok(Dataset { dims, n_classes, train_x: xs, train_y: ys, test_x, test_y })
    }
}

/// Gaussian class clusters with controllable separability.
///
/// Class centers are drawn once from `N(0, CENTER_SCALE^2 I)`; each sample is
/// its class center plus `cluster_spread`-scaled isotropic noise. The last
/// 20% of samples form the held-out test split.
pub fn generate_synthetic_dataset(
    n_classes: usize,
    dims: usize,
    n_samples: usize,
    cluster_spread: f64,
    rng: &mut Stream,
) -> Result<Dataset, ModelError> {
    if n_classes < 2 {
        return Err(ModelError::InvalidConfig(format!("n_classes must be >= 2, got {n_classes}")));
    }
    if dims < 2 {
        return Err(ModelError::InvalidConfig(format!("dims must be >= 2, got {dims}")));
    }
    if n_samples < n_classes {
        return Err(ModelError::InvalidConfig(format!(
            "n_samples must be >= n_classes, got {n_samples}"
        )));
    }
    if !(cluster_spread >= 0.0) {
        return Err(ModelError::InvalidConfig("cluster_spread must be >= 0".into()));
    }
    let unit = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<f64> = (0..n_classes * dims).map(|_| CENTER_SCALE * unit.sample(rng)).collect();
    let n_test = n_samples / 5;
    let n_train = n_samples - n_test;
    let mut xs = Vec::with_capacity(n_samples * dims);
    let mut ys = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let y = rng.gen_range(0..n_classes);
        ys.push(y);
        for d in 0..dims {
            xs.push(centers[y * dims + d] + cluster_spread * unit.sample(rng));
        }
    }
    let test_x = xs.split_off(n_train * dims);
    let test_y = ys.split_off(n_train);
    Ok(Dataset { dims, n_classes, train_x: xs, train_y: ys, test_x, test_y })
}

/// Disjoint per-device assignment of train-sample indices.
#[derive(Debug, Clone)]
pub struct DevicePartition {
    /// Train indices per device.
    pub indices: Vec<Vec<usize>>,
}

impl DevicePartition {
    pub fn n_devices(&self) -> usize {
        self.indices.len()
    }

    /// Sample count s_i on device i.
    pub fn count(&self, device: usize) -> usize {
        self.indices[device].len()
    }

    pub fn total(&self) -> usize {
        self.indices.iter().map(|v| v.len()).sum()
    }
}

/// Per-device sample counts from a lognormal with mean `total / n` and the
/// given log-scale standard deviation. Counts are rounded, floored at 1, and
/// proportionally shrunk if the rounded sum exceeds `total`.
pub fn lognormal_counts(total: usize, n: usize, sigma: f64, rng: &mut Stream) -> Vec<usize> {
    assert!(n >= 1 && total >= n);
    let mean = total as f64 / n as f64;
    let mu = mean.ln() - sigma * sigma / 2.0;
    let dist = LogNormal::new(mu, sigma).expect("valid lognormal");
    let mut counts: Vec<usize> = (0..n).map(|_| (dist.sample(rng).round() as usize).max(1)).collect();
    let sum: usize = counts.iter().sum();
    if sum > total {
        let scale = total as f64 / sum as f64;
        for c in counts.iter_mut() {
            *c = ((*c as f64 * scale).floor() as usize).max(1);
        }
    }
    counts
}

/// Non-IID partition: per-device class proportions drawn from a symmetric
/// Dirichlet(alpha), then samples assigned without replacement.
///
/// Remainder rule: per-device class targets come from largest-remainder
/// apportionment of `count * proportions`; when a class pool runs dry the
/// shortfall is filled one sample at a time from whichever class currently
/// has the most unassigned samples (lowest class index on ties).
pub fn dirichlet_partition(
    ds: &Dataset,
    n_devices: usize,
    alpha: f64,
    counts: &[usize],
    rng: &mut Stream,
) -> Result<DevicePartition, ModelError> {
    if n_devices == 0 || counts.len() != n_devices {
        return Err(ModelError::Partition(format!(
            "need one count per device ({n_devices}), got {}",
            counts.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(ModelError::Partition(format!("alpha must be > 0, got {alpha}")));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(ModelError::Partition("every device needs at least 1 sample".into()));
    }
    let requested: usize = counts.iter().sum();
    if requested > ds.n_train() {
        return Err(ModelError::Partition(format!(
            "requested {requested} samples but only {} train samples exist",
            ds.n_train()
        )));
    }

    // Shuffled per-class pools of train indices.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.train_y.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(rng);
    }

    let gamma = Gamma::new(alpha, 1.0).map_err(|e| ModelError::Partition(e.to_string()))?;
    let mut indices: Vec<Vec<usize>> = Vec::with_capacity(n_devices);
    for &count in counts {
        // q ~ Dirichlet(alpha) over classes.
        let mut q: Vec<f64> = (0..ds.n_classes).map(|_| gamma.sample(rng).max(1e-300)).collect();
        let qs: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= qs);

        // Largest-remainder apportionment of `count` by q.
        let shares: Vec<f64> = q.iter().map(|p| p * count as f64).collect();
        let mut want: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
        let mut leftover = count - want.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..ds.n_classes).collect();
        order.sort_by(|&a, &b| {
            let ra = shares[a] - shares[a].floor();
            let rb = shares[b] - shares[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &c in &order {
            if leftover == 0 {
                break;
            }
            want[c] += 1;
            leftover -= 1;
        }

        let mut mine = Vec::with_capacity(count);
        for (c, &w) in want.iter().enumerate() {
            let take = w.min(pools[c].len());
            for _ in 0..take {
                mine.push(pools[c].pop().unwrap());
            }
        }
        // Fill shortfall from the fullest remaining pools.
        while mine.len() < count {
            let c = (0..ds.n_classes)
                .max_by(|&a, &b| pools[a].len().cmp(&pools[b].len()).then(b.cmp(&a)))
                .unwrap();
            if pools[c].is_empty() {
                return Err(ModelError::Partition("ran out of samples while filling devices".into()));
            }
            mine.push(pools[c].pop().unwrap());
        }
        indices.push(mine);
    }
    Ok(DevicePartition { indices })
}

/// One SGD minibatch materialized from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dims: usize,
    x: Vec<f64>,
    y: Vec<usize>,
}

impl Batch {
    pub fn from_rows(ds: &Dataset, rows: &[usize]) -> Self {
        let mut x = Vec::with_capacity(rows.len() * ds.dims);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(ds.train_row(r));
            y.push(ds.train_y[r]);
        }
        Batch { dims: ds.dims, x, y }
    }

    /// Build directly from raw rows (used by tests and synthetic probes).
    pub fn from_raw(dims: usize, x: Vec<f64>, y: Vec<usize>) -> Self {
        assert_eq!(x.len(), y.len() * dims);
        Batch { dims, x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x(&self, s: usize) -> &[f64] {
        &self.x[s * self.dims..(s + 1) * self.dims]
    }

    pub fn y(&self, s: usize) -> usize {
        self.y[s]
    }
}

/// Batches for one epoch: the device's indices are shuffled and chunked, so
/// each sample appears at most once per epoch.
pub fn epoch_batches(ds: &Dataset, device_indices: &[usize], batch_size: usize, rng: &mut Stream) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut order = device_indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(|chunk| Batch::from_rows(ds, chunk)).collect()
}
