use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityBin {
    /// `[0, 0.2)`
    Low,
    /// `[0.2, 0.8]`
    Middle,
    /// `(0.8, 1]`
    High,
}

impl ProbabilityBin {
    pub const ALL: [ProbabilityBin; 3] = [Self::Low, Self::Middle, Self::High];

    pub fn of(p: f64) -> Self {
        if p < 0.2 {
            Self::Low
        } else if p <= 0.8 {
            Self::Middle
        } else {
            Self::High
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Low => "[0, 0.2)",
            Self::Middle => "[0.2, 0.8]",
            Self::High => "(0.8, 1]",
        }
    }
}

/// What the tail profile needs from one audit.
pub trait TailObservation {
    fn seed_probability(&self) -> f64;
    fn beta_norm(&self) -> f64;
    fn r_squared(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailBin {
    pub bin: ProbabilityBin,
    pub label: String,
    pub count: usize,
    /// `None` when the bin is empty.
    pub mean_beta_norm: Option<f64>,
    pub mean_r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProfile {
    pub bins: Vec<TailBin>,
}

impl TailProfile {
    pub fn bin(&self, which: ProbabilityBin) -> &TailBin {
        self.bins.iter().find(|b| b.bin == which).expect("all bins present")
    }
}

/// Groups audits by their seed probability and averages `‖β‖₂` and R² per group.
pub fn tail_profile<T: TailObservation>(observations: &[T]) -> TailProfile {
    let bins = ProbabilityBin::ALL
        .iter()
        .map(|&bin| {
            let members: Vec<&T> =
                observations.iter().filter(|o| ProbabilityBin::of(o.seed_probability()) == bin).collect();
            let count = members.len();
            let mean =
                |f: &dyn Fn(&T) -> f64| (count > 0).then(|| members.iter().map(|m| f(m)).sum::<f64>() / count as f64);
            TailBin {
                bin,
                label: bin.label().to_string(),
                count,
                mean_beta_norm: mean(&|o| o.beta_norm()),
                mean_r_squared: mean(&|o| o.r_squared()),
            }
        })
        .collect();
    TailProfile { bins }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Obs(f64, f64, f64);
    impl TailObservation for Obs {
        fn seed_probability(&self) -> f64 {
            self.0
        }
        fn beta_norm(&self) -> f64 {
            self.1
        }
        fn r_squared(&self) -> f64 {
            self.2
        }
    }

    #[test]
    fn bin_edges() {
        assert_eq!(ProbabilityBin::of(0.0), ProbabilityBin::Low);
        assert_eq!(ProbabilityBin::of(0.1999), ProbabilityBin::Low);
        assert_eq!(ProbabilityBin::of(0.2), ProbabilityBin::Middle);
        assert_eq!(ProbabilityBin::of(0.8), ProbabilityBin::Middle);
        assert_eq!(ProbabilityBin::of(0.8001), ProbabilityBin::High);
        assert_eq!(ProbabilityBin::of(1.0), ProbabilityBin::High);
    }

    #[test]
    fn averages_per_bin_and_empty_bins() {
        let obs = [Obs(0.1, 0.2, 0.5), Obs(0.15, 0.4, 0.7), Obs(0.5, 1.0, 0.9)];
        let t = tail_profile(&obs);
        let low = t.bin(ProbabilityBin::Low);
        assert_eq!(low.count, 2);
        assert!((low.mean_beta_norm.unwrap() - 0.3).abs() < 1e-12);
        assert!((low.mean_r_squared.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(t.bin(ProbabilityBin::Middle).count, 1);
        let high = t.bin(ProbabilityBin::High);
        assert_eq!(high.count, 0);
        assert_eq!(high.mean_beta_norm, None);
        assert_eq!(high.mean_r_squared, None);
    }
}
