//! View-state semantics shared by the service and any client: expression
//! normalization for color mapping, categorical palettes, and the
//! metadata/expression mode state machine.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PresentationError {
    #[error("negative expression value {value} at cell {cell}")]
    NegativeExpression { cell: usize, value: f64 },
    #[error("non-finite expression value at cell {0}")]
    NonFiniteExpression(usize),
}

/// Scale information for the color legend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub gene_name: String,
    pub raw_min: f64,
    pub raw_max: f64,
    /// Divisor applied before clamping to 1.
    pub clip_value: f64,
}

/// Nonzero count below which the maximum is used as the clip value.
pub const PERCENTILE_MIN_NONZEROS: usize = 100;

/// Maps expression onto `[0, 1]` by dividing by the 99th percentile of
/// the nonzero values (nearest rank), so a handful of extreme cells do not
/// wash out the rest. With fewer than 100 nonzeros the maximum is used.
pub fn normalize_expression(
    gene_name: &str,
    values: &[f64],
) -> Result<(Vec<f64>, NormalizationInfo), PresentationError> {
    let mut nonzero = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(PresentationError::NonFiniteExpression(i));
        }
        if v < 0.0 {
            return Err(PresentationError::NegativeExpression { cell: i, value: v });
        }
        if v != 0.0 {
            nonzero.push(v);
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if values.is_empty() {
        lo = 0.0;
        hi = 0.0;
    }
    let clip_value = clip_value(&mut nonzero);
    let normalized = if nonzero.is_empty() {
        vec![0.0; values.len()]
    } else {
        values.iter().map(|v| (v / clip_value).min(1.0)).collect()
    };
    Ok((
        normalized,
        NormalizationInfo {
            gene_name: gene_name.to_string(),
            raw_min: lo,
            raw_max: hi,
            clip_value,
        },
    ))
}

fn clip_value(nonzero: &mut [f64]) -> f64 {
    let m = nonzero.len();
    if m == 0 {
        return 1.0;
    }
    if m < PERCENTILE_MIN_NONZEROS {
        return nonzero.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    // nearest rank: the ceil(0.99 m)-th smallest, 1-based
    let rank = (99 * m).div_ceil(100);
    let (_, v, _) = nonzero.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Quantizes a `[0, 1]` value to 16-bit fixed point.
pub fn quantize_unit(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize_unit(q: u16) -> f64 {
    q as f64 / 65535.0
}

/// Fractional part of the inverse golden ratio.
pub const INV_GOLDEN_RATIO: f64 = 0.618_033_988_749_894_8;
pub const PALETTE_SATURATION: f64 = 0.75;
pub const PALETTE_VALUE: f64 = 0.95;

/// Deterministic categorical colors stepping hue by the golden angle.
pub fn categorical_palette(n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|k| {
            let hue = (k as f64 * INV_GOLDEN_RATIO).fract() * 360.0;
            hsv_to_rgb(hue, PALETTE_SATURATION, PALETTE_VALUE)
        })
        .collect()
}

/// HSV (hue in degrees) to RGB in `[0, 1]`.
pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Metadata,
    Expression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewState {
    pub mode: ViewMode,
    pub active_annotation: usize,
    /// Number of annotations available to cycle through.
    pub annotation_count: usize,
    pub gene_set: Vec<u32>,
    pub gene_cursor: usize,
}

impl ViewState {
    pub fn new(annotation_count: usize) -> Self {
        ViewState {
            mode: ViewMode::Metadata,
            active_annotation: 0,
            annotation_count,
            gene_set: Vec::new(),
            gene_cursor: 0,
        }
    }

    pub fn current_gene(&self) -> Option<u32> {
        self.gene_set.get(self.gene_cursor).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ViewAction {
    ToggleMode,
    NextAnnotation,
    NextGene,
    PrevGene,
    LoadGeneSet { genes: Vec<u32> },
}

/// Pure transition function over [`ViewState`].
pub fn step_view(state: &ViewState, action: &ViewAction) -> ViewState {
    let mut next = state.clone();
    match action {
        ViewAction::ToggleMode => {
            next.mode = match state.mode {
                ViewMode::Metadata => ViewMode::Expression,
                ViewMode::Expression => ViewMode::Metadata,
            }
        }
        ViewAction::NextAnnotation => {
            if state.annotation_count > 0 {
                next.active_annotation = (state.active_annotation + 1) % state.annotation_count;
            }
        }
        ViewAction::NextGene => {
            if !state.gene_set.is_empty() {
                next.gene_cursor = (state.gene_cursor + 1) % state.gene_set.len();
            }
        }
        ViewAction::PrevGene => {
            let n = state.gene_set.len();
            if n > 0 {
                next.gene_cursor = (state.gene_cursor + n - 1) % n;
            }
        }
        ViewAction::LoadGeneSet { genes } => {
            next.gene_set = genes.clone();
            next.gene_cursor = 0;
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn small_vectors_clip_at_max() {
        let (n, info) = normalize_expression("g", &[0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(n, vec![0.0, 0.25, 0.5, 1.0]);
        assert_eq!((info.raw_min, info.raw_max, info.clip_value), (0.0, 4.0, 4.0));
    }

    #[test]
    fn all_zero_vector() {
        let (n, info) = normalize_expression("g", &[0.0; 5]).unwrap();
        assert_eq!(n, vec![0.0; 5]);
        assert_eq!((info.raw_min, info.raw_max, info.clip_value), (0.0, 0.0, 1.0));
    }

    #[test]
    fn percentile_clip_ignores_outliers() {
        let mut values = vec![1.0; 990];
        values.extend([100.0; 10]);
        values.extend([0.0; 50]);
        // sorting oracle: ceil(0.99 * 1000) = 990th smallest nonzero
        let mut nz: Vec<f64> = values.iter().cloned().filter(|v| *v != 0.0).collect();
        nz.sort_by(f64::total_cmp);
        let oracle = nz[(0.99f64 * nz.len() as f64).ceil() as usize - 1];
        let (n, info) = normalize_expression("g", &values).unwrap();
        assert_eq!(info.clip_value, oracle);
        assert_eq!(info.clip_value, 1.0);
        assert_eq!(info.raw_max, 100.0);
        assert!(n[..1000].iter().all(|v| *v == 1.0));
        assert!(n[1000..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rank_uses_exact_integer_ceiling() {
        // m = 100: rank 99; m = 101: ceil(99.99) = 100
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(normalize_expression("g", &v).unwrap().1.clip_value, 99.0);
        let v: Vec<f64> = (1..=101).map(f64::from).collect();
        assert_eq!(normalize_expression("g", &v).unwrap().1.clip_value, 100.0);
    }

    #[test]
    fn rejects_negative_and_non_finite() {
        assert_eq!(
            normalize_expression("g", &[1.0, -0.5]).unwrap_err(),
            PresentationError::NegativeExpression { cell: 1, value: -0.5 }
        );
        assert!(normalize_expression("g", &[f64::NAN]).is_err());
    }

    #[test]
    fn quantization_round_trip_bound() {
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            assert!((dequantize_unit(quantize_unit(v)) - v).abs() <= 1.0 / 65535.0);
        }
        assert_eq!(quantize_unit(1.0), 65535);
        assert_eq!(quantize_unit(0.25), 16384);
    }

    #[test]
    fn palette_hues() {
        let p = categorical_palette(5);
        // k = 0 is pure-hue red family: r = v, b = g = v(1 - s)
        assert_relative_eq!(p[0][0], 0.95);
        assert_relative_eq!(p[0][1], 0.95 * 0.25);
        assert_relative_eq!(p[0][2], 0.95 * 0.25);
        assert_eq!(p, categorical_palette(5));
        // k = 1: hue 222.49°, sector 3 (180-240): r = m, b = v, g rising
        let hue: f64 = 0.618_033_988_749_894_8 * 360.0;
        assert_relative_eq!(hue, 222.492, epsilon = 1e-3);
        let m = 0.95 * 0.25;
        let c = 0.95 * 0.75;
        let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
        assert_relative_eq!(p[1][0], m, epsilon = 1e-12);
        assert_relative_eq!(p[1][1], x + m, epsilon = 1e-12);
        assert_relative_eq!(p[1][2], 0.95, epsilon = 1e-12);
    }

    #[test]
    fn view_transitions() {
        let s = ViewState::new(3);
        let s = step_view(&s, &ViewAction::ToggleMode);
        assert_eq!(s.mode, ViewMode::Expression);
        let s = step_view(&s, &ViewAction::LoadGeneSet { genes: vec![4, 8, 15] });
        assert_eq!(s.gene_cursor, 0);
        let mut s2 = s.clone();
        s2.gene_cursor = 2;
        assert_eq!(step_view(&s2, &ViewAction::NextGene).gene_cursor, 0);
        assert_eq!(step_view(&s, &ViewAction::PrevGene).gene_cursor, 2);
        let empty = ViewState::new(2);
        assert_eq!(step_view(&empty, &ViewAction::NextGene), empty);
        let a = step_view(&step_view(&empty, &ViewAction::NextAnnotation), &ViewAction::NextAnnotation);
        assert_eq!(a.active_annotation, 0);
    }

    fn expression_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(
            prop_oneof![2 => Just(0.0), 3 => 0.0f64..50.0, 1 => 50.0f64..5000.0],
            0..400,
        )
    }

    proptest! {
        #[test]
        fn output_in_unit_interval_and_range_brackets(v in expression_vec()) {
            let (n, info) = normalize_expression("g", &v).unwrap();
            prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
            for x in &v {
                prop_assert!(info.raw_min <= *x && *x <= info.raw_max);
            }
            prop_assert!(info.clip_value > 0.0);
        }

        #[test]
        fn scale_covariance(v in expression_vec(), k in -8i32..8, c in 0.01f64..100.0) {
            let (n1, i1) = normalize_expression("g", &v).unwrap();
            let exact = 2f64.powi(k);
            let (n2, i2) = normalize_expression("g", &v.iter().map(|x| x * exact).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(&n1, &n2);
            if i1.raw_max > 0.0 {
                prop_assert_eq!(i2.clip_value, i1.clip_value * exact);
            }
            let (n3, i3) = normalize_expression("g", &v.iter().map(|x| x * c).collect::<Vec<_>>()).unwrap();
            for (a, b) in n1.iter().zip(&n3) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            if i1.raw_max > 0.0 {
                prop_assert!((i3.clip_value - i1.clip_value * c).abs() <= 1e-12 * i3.clip_value);
            }
        }

        #[test]
        fn next_gene_cycles(len in 1usize..20, start in 0usize..20) {
            let mut s = ViewState::new(1);
            s.gene_set = (0..len as u32).collect();
            s.gene_cursor = start % len;
            let mut t = s.clone();
            for _ in 0..len {
                t = step_view(&t, &ViewAction::NextGene);
            }
            prop_assert_eq!(t, s);
        }
    }
}
