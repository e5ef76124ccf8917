use std::f64::consts::PI;

use super::TrainConfig;

/// Learning rate for epoch `t` (0-based).
///
/// Epochs `t < T_w` ramp linearly: `γ_max · (t + 1) / T_w`, so the first
/// epoch runs at `γ_max / T_w` and the last warm-up epoch at `γ_max`. From
/// `t = T_w` on, cosine annealing:
/// `γ_min + ½(γ_max − γ_min)(1 + cos(π (t − T_w) / (T − T_w)))`.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> f64 {
    let (max, min) = (cfg.gamma_max, cfg.gamma_min);
    let (tw, total) = (cfg.warmup, cfg.epochs);
    if t < tw {
        return max * (t + 1) as f64 / tw as f64;
    }
    if total <= tw {
        return max;
    }
    let phase = (t.min(total) - tw) as f64 / (total - tw) as f64;
    min + 0.5 * (max - min) * (1.0 + (PI * phase).cos())
}
