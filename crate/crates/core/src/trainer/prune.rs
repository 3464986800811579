use serde::{Deserialize, Serialize};

use super::model::MlpModel;
use super::TrainError;

/// Cubic sparsity ramp `s_f + (s_i - s_f)(1 - (t - t0) / (t_end - t0))^3`,
/// re-evaluated every `frequency` steps and held constant in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub frequency: u64,
    pub start_step: u64,
    pub end_step: u64,
}

impl PruneSchedule {
    pub fn new(start_step: u64, end_step: u64) -> Self {
        PruneSchedule {
            initial_sparsity: 0.5,
            final_sparsity: 0.9,
            frequency: 10,
            start_step,
            end_step,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = (0.0..1.0).contains(&self.initial_sparsity)
            && (self.initial_sparsity..1.0).contains(&self.final_sparsity)
            && self.frequency >= 1
            && self.end_step > self.start_step;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!(
                "invalid prune schedule {self:?}"
            )))
        }
    }

    /// True when `step` is a step at which the mask is recomputed.
    pub fn is_update_step(&self, step: u64) -> bool {
        step >= self.start_step
            && (step >= self.end_step || (step - self.start_step).is_multiple_of(self.frequency))
    }
}

/// Target sparsity at `step`: 0 before the schedule starts.
pub fn sparsity_at(schedule: &PruneSchedule, step: u64) -> f64 {
    if step < schedule.start_step {
        return 0.0;
    }
    if step >= schedule.end_step {
        return schedule.final_sparsity;
    }
    let held = step - (step - schedule.start_step) % schedule.frequency;
    let progress =
        (held - schedule.start_step) as f64 / (schedule.end_step - schedule.start_step) as f64;
    schedule.final_sparsity
        + (schedule.initial_sparsity - schedule.final_sparsity) * (1.0 - progress).powi(3)
}

/// Masks the smallest-magnitude live weights of each layer until
/// `round(target * size)` entries are masked. Ties go to the lower index.
/// Layers already at or above the target are left alone.
pub fn apply_pruning(model: &mut MlpModel, target: f64) {
    for (w, mask) in model.weights.iter_mut().zip(model.masks.iter_mut()) {
        let size = w.len();
        let wanted = (target * size as f64).round() as usize;
        let masked = mask.iter().filter(|&&m| m == 0.0).count();
        if wanted <= masked {
            continue;
        }
        // Row-major index order, matching the archive layout.
        let (rows, cols) = w.shape();
        let mut live: Vec<(f64, usize)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .enumerate()
            .filter(|&(_, (r, c))| mask[(r, c)] != 0.0)
            .map(|(i, (r, c))| (w[(r, c)].abs(), i))
            .collect();
        live.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in live.iter().take(wanted - masked) {
            mask[(i / cols, i % cols)] = 0.0;
        }
        w.component_mul_assign(mask);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::model::Head;
    use nalgebra::{DMatrix, DVector};

    fn model(values: &[f64], rows: usize, cols: usize) -> MlpModel {
        MlpModel {
            weights: vec![DMatrix::from_row_slice(rows, cols, values)],
            biases: vec![DVector::zeros(cols)],
            masks: vec![DMatrix::from_element(rows, cols, 1.0)],
            head: Head::Linear,
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = PruneSchedule::new(100, 300);
        assert_eq!(sparsity_at(&s, 100), 0.5);
        assert_eq!(sparsity_at(&s, 300), 0.9);
        assert_eq!(sparsity_at(&s, 1000), 0.9);
        assert_eq!(sparsity_at(&s, 50), 0.0);
        assert!((sparsity_at(&s, 200) - 0.85).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_and_piecewise_constant() {
        let s = PruneSchedule::new(0, 95);
        let mut prev = 0.0;
        for t in 0..120 {
            let v = sparsity_at(&s, t);
            assert!(v >= prev);
            if t > 0 && t < 95 && t % 10 != 0 {
                assert_eq!(v, sparsity_at(&s, t - 1));
            }
            prev = v;
        }
    }

    #[test]
    fn prunes_smallest_magnitudes() {
        let mut m = model(&[0.1, -0.5, 0.2, 0.9], 1, 4);
        apply_pruning(&mut m, 0.5);
        assert_eq!(m.masks[0].as_slice(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.weights[0].as_slice(), &[0.0, -0.5, 0.0, 0.9]);
    }

    #[test]
    fn zero_or_current_target_is_noop() {
        let mut m = model(&[0.1, -0.5, 0.2, 0.9], 2, 2);
        let before = m.clone();
        apply_pruning(&mut m, 0.0);
        assert_eq!(m, before);
        apply_pruning(&mut m, 0.5);
        let after = m.clone();
        apply_pruning(&mut m, 0.5);
        assert_eq!(m, after);
    }

    #[test]
    fn ties_broken_by_row_major_index() {
        let mut m = model(&[1.0, 1.0, 1.0, 1.0], 2, 2);
        apply_pruning(&mut m, 0.25);
        // Entry (0, 0) has row-major index 0.
        assert_eq!(m.masks[0][(0, 0)], 0.0);
        apply_pruning(&mut m, 0.5);
        assert_eq!(m.masks[0][(0, 1)], 0.0);
        assert_eq!(m.masks[0][(1, 0)], 1.0);
    }
}
