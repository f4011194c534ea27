//! Per-frame IoU and the TCONT temporal-consistency score.

use crate::error::{Result, SfsegError};
use crate::volume::{FlowField, VideoVolume};

/// Per-frame Jaccard scores and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// Frame index of each score.
    pub frames: Vec<usize>,
    pub per_frame: Vec<f64>,
    pub mean: f64,
    pub threshold: f64,
}

impl IouReport {
    fn new(frames: Vec<usize>, per_frame: Vec<f64>, threshold: f64) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
        IouReport {
            frames,
            per_frame,
            mean,
            threshold,
        }
    }

    /// `frame,iou` rows followed by `mean,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,iou\n");
        for (f, v) in self.frames.iter().zip(&self.per_frame) {
            out.push_str(&format!("{f},{v:.12}\n"));
        }
        out.push_str(&format!("mean,{:.12}\n", self.mean));
        out
    }
}

fn frame_iou(pred: &[f64], gt: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let p = p >= threshold;
        let g = g == 1.0;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Frame-by-frame IoU of `pred >= threshold` against the binary `gt`.
/// A frame where both masks are empty scores 1.
pub fn iou(pred: &VideoVolume, gt: &VideoVolume, threshold: f64) -> Result<IouReport> {
    pred.ensure_same_shape(gt, "prediction vs ground truth")?;
    gt.ensure_binary("ground truth")?;
    let per_frame = (0..pred.frames())
        .map(|t| frame_iou(pred.frame(t), gt.frame(t), threshold))
        .collect();
    Ok(IouReport::new((0..pred.frames()).collect(), per_frame, threshold))
}

/// Backward warp of one frame: `out(y, x)` is the bilinear sample of `mask` at
/// `(y + dy(y, x), x + dx(y, x))`, reading zero outside the frame.
pub fn warp(mask: &[f64], dx: &[f64], dy: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    let n = height * width;
    if mask.len() != n || dx.len() != n || dy.len() != n {
        return Err(SfsegError::Shape(format!(
            "warp needs {height}x{width} fields, got mask {}, dx {}, dy {}",
            mask.len(),
            dx.len(),
            dy.len()
        )));
    }
    let at = |y: i64, x: i64| -> f64 {
        if y < 0 || x < 0 || y >= height as i64 || x >= width as i64 {
            0.0
        } else {
            mask[y as usize * width + x as usize]
        }
    };
    let mut out = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let sy = y as f64 + dy[i];
            let sx = x as f64 + dx[i];
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let mut v = (1.0 - fy) * (1.0 - fx) * at(y0, x0);
            if fx != 0.0 {
                v += (1.0 - fy) * fx * at(y0, x0 + 1);
            }
            if fy != 0.0 {
                v += fy * (1.0 - fx) * at(y0 + 1, x0);
                if fx != 0.0 {
                    v += fy * fx * at(y0 + 1, x0 + 1);
                }
            }
            out[i] = v;
        }
    }
    Ok(out)
}

/// Frame `t` of `video` warped with frame `t` of `flow`.
pub fn warp_frame(video: &VideoVolume, flow: &FlowField, t: usize) -> Result<Vec<f64>> {
    warp(
        video.frame(t),
        flow.dx().frame(t),
        flow.dy().frame(t),
        video.height(),
        video.width(),
    )
}

/// Flow-averaged masks for the interior frames `1..n-1`.
///
/// Frame `i` of the result is the mean of frame `i - 1` warped by
/// `flow_dir[i - 1]`, frame `i` itself, and frame `i + 1` warped by
/// `flow_rev[i + 1]`.
pub fn tcont_average(
    pred: &VideoVolume,
    flow_dir: &FlowField,
    flow_rev: &FlowField,
) -> Result<Vec<Vec<f64>>> {
    let nf = pred.frames();
    if nf < 3 {
        return Err(SfsegError::Parameter(format!(
            "TCONT needs >= 3 frames, got {nf}"
        )));
    }
    for (flow, name) in [(flow_dir, "direct flow"), (flow_rev, "reverse flow")] {
        if flow.shape() != pred.shape() {
            return Err(SfsegError::Shape(format!(
                "{name} is {} but the prediction is {}",
                flow.shape(),
                pred.shape()
            )));
        }
    }
    (1..nf - 1)
        .map(|i| {
            let prev = warp_frame(pred, flow_dir, i - 1)?;
            let next = warp_frame(pred, flow_rev, i + 1)?;
            Ok(prev
                .iter()
                .zip(&next)
                .zip(pred.frame(i))
                .map(|((p, n), c)| ((p + n) + c) / 3.0)
                .collect())
        })
        .collect()
}

/// IoU of the flow-averaged interior frames against `gt`.
pub fn tcont(
    pred: &VideoVolume,
    gt: &VideoVolume,
    flow_dir: &FlowField,
    flow_rev: &FlowField,
    threshold: f64,
) -> Result<IouReport> {
    pred.ensure_same_shape(gt, "prediction vs ground truth")?;
    gt.ensure_binary("ground truth")?;
    let averaged = tcont_average(pred, flow_dir, flow_rev)?;
    let per_frame = averaged
        .iter()
        .enumerate()
        .map(|(k, avg)| frame_iou(avg, gt.frame(k + 1), threshold))
        .collect();
    Ok(IouReport::new((1..pred.frames() - 1).collect(), per_frame, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthShape, SynthSpec};
    use crate::volume::{reverse_frames, Shape};
    use proptest::prelude::*;

    fn moving(shape: SynthShape, start: (i64, i64), velocity: (i64, i64)) -> crate::synth::SynthVideo {
        generate(&SynthSpec {
            frames: 7,
            height: 14,
            width: 24,
            shape,
            start: Some(start),
            velocity,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn identical_masks() {
        let v = moving(SynthShape::Rectangle { height: 3, width: 4 }, (2, 2), (1, 1)).mask;
        let r = iou(&v, &v, 0.5).unwrap();
        assert!(r.per_frame.iter().all(|&x| x == 1.0));
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn disjoint_and_partial_overlap() {
        let a = VideoVolume::from_dims(1, 2, 4, vec![1., 1., 0., 0., 1., 1., 0., 0.]).unwrap();
        let b = VideoVolume::from_dims(1, 2, 4, vec![0., 0., 1., 1., 0., 0., 1., 1.]).unwrap();
        assert_eq!(iou(&a, &b, 0.5).unwrap().mean, 0.0);
        let c = VideoVolume::from_dims(1, 2, 4, vec![0., 1., 1., 0., 0., 1., 1., 0.]).unwrap();
        assert!((iou(&a, &c, 0.5).unwrap().mean - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(iou(&a, &c, 0.5).unwrap().mean, iou(&c, &a, 0.5).unwrap().mean);
    }

    #[test]
    fn empty_frames_score_one() {
        let z = VideoVolume::zeros(Shape::new(2, 3, 3).unwrap());
        assert_eq!(iou(&z, &z, 0.5).unwrap().per_frame, vec![1.0, 1.0]);
    }

    #[test]
    fn iou_errors() {
        let a = VideoVolume::zeros(Shape::new(2, 3, 3).unwrap());
        let b = VideoVolume::zeros(Shape::new(2, 3, 4).unwrap());
        assert!(matches!(iou(&a, &b, 0.5), Err(SfsegError::Shape(_))));
        let soft = VideoVolume::filled(a.shape(), 0.3).unwrap();
        assert!(matches!(iou(&a, &soft, 0.5), Err(SfsegError::Validation(_))));
    }

    #[test]
    fn csv_layout() {
        let a = VideoVolume::from_dims(2, 1, 2, vec![1., 0., 1., 1.]).unwrap();
        let gt = VideoVolume::from_dims(2, 1, 2, vec![1., 0., 1., 0.]).unwrap();
        let csv = iou(&a, &gt, 0.5).unwrap().to_csv();
        assert_eq!(csv, "frame,iou\n0,1.000000000000\n1,0.500000000000\nmean,0.750000000000\n");
    }

    #[test]
    fn zero_flow_is_identity() {
        let m: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let z = vec![0.0; 12];
        assert_eq!(warp(&m, &z, &z, 3, 4).unwrap(), m);
    }

    #[test]
    fn integer_shift() {
        let m = vec![1., 2., 3., 4., 5., 6.];
        let one = vec![1.0; 6];
        let z = vec![0.0; 6];
        assert_eq!(warp(&m, &one, &z, 2, 3).unwrap(), vec![2., 3., 0., 5., 6., 0.]);
        assert_eq!(warp(&m, &z, &one, 2, 3).unwrap(), vec![4., 5., 6., 0., 0., 0.]);
    }

    #[test]
    fn half_pixel_on_step_edge() {
        let m = vec![0., 1., 1.];
        let out = warp(&m, &[0.5; 3], &[0.0; 3], 1, 3).unwrap();
        assert_eq!(out, vec![0.5, 1.0, 0.5]);
    }

    #[test]
    fn static_video_tcont_equals_iou() {
        let v = moving(SynthShape::Disk { radius: 3 }, (6, 8), (0, 0));
        let t = tcont(&v.mask, &v.mask, &v.flow_dir, &v.flow_rev, 0.5).unwrap();
        assert_eq!(t.frames, (1..6).collect::<Vec<_>>());
        assert!(t.per_frame.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn exact_flows_align_translating_masks() {
        let gt = moving(SynthShape::Rectangle { height: 5, width: 6 }, (2, 1), (1, 2));
        let pred = moving(SynthShape::Rectangle { height: 3, width: 3 }, (3, 2), (1, 2)).mask;
        let direct = iou(&pred, &gt.mask, 0.5).unwrap();
        let t = tcont(&pred, &gt.mask, &gt.flow_dir, &gt.flow_rev, 0.5).unwrap();
        for (k, &v) in t.per_frame.iter().enumerate() {
            assert!((v - direct.per_frame[k + 1]).abs() < 1e-9);
        }
        // the synthetic flows transport each frame onto its neighbour
        for i in 0..6 {
            assert_eq!(warp_frame(&gt.mask, &gt.flow_dir, i).unwrap(), gt.mask.frame(i + 1));
            assert_eq!(warp_frame(&gt.mask, &gt.flow_rev, i + 1).unwrap(), gt.mask.frame(i));
        }
    }

    #[test]
    fn inconsistent_flows_lower_tcont() {
        let v = moving(SynthShape::Rectangle { height: 3, width: 3 }, (4, 1), (0, 2));
        let zero = FlowField::zeros(v.mask.shape());
        let t = tcont(&v.mask, &v.mask, &zero, &zero, 0.5).unwrap();
        let direct = iou(&v.mask, &v.mask, 0.5).unwrap();
        assert!(t.mean < direct.mean);
    }

    #[test]
    fn tcont_needs_three_frames() {
        let v = VideoVolume::zeros(Shape::new(2, 2, 2).unwrap());
        let z = FlowField::zeros(v.shape());
        let err = tcont(&v, &v, &z, &z, 0.5).unwrap_err();
        assert!(err.to_string().contains(">= 3 frames"));
    }

    #[test]
    fn time_mirror_invariance() {
        let gt = moving(SynthShape::Disk { radius: 2 }, (5, 4), (1, 2));
        let pred = gt.mask.map(|v| 0.3 + 0.5 * v).unwrap();
        let fwd = tcont(&pred, &gt.mask, &gt.flow_dir, &gt.flow_rev, 0.5).unwrap();
        let back = tcont(
            &reverse_frames(&pred),
            &reverse_frames(&gt.mask),
            &gt.flow_rev.reversed_in_time(),
            &gt.flow_dir.reversed_in_time(),
            0.5,
        )
        .unwrap();
        let mut rev = back.per_frame.clone();
        rev.reverse();
        assert_eq!(fwd.per_frame, rev);
    }

    proptest! {
        #[test]
        fn warp_is_linear(
            m1 in proptest::collection::vec(0.0f64..1.0, 12),
            m2 in proptest::collection::vec(0.0f64..1.0, 12),
            dx in proptest::collection::vec(-2.0f64..2.0, 12),
            dy in proptest::collection::vec(-2.0f64..2.0, 12),
            a in -2.0f64..2.0,
        ) {
            let combo: Vec<f64> = m1.iter().zip(&m2).map(|(x, y)| a * x + y).collect();
            let lhs = warp(&combo, &dx, &dy, 3, 4).unwrap();
            let w1 = warp(&m1, &dx, &dy, 3, 4).unwrap();
            let w2 = warp(&m2, &dx, &dy, 3, 4).unwrap();
            for i in 0..12 {
                prop_assert!((lhs[i] - (a * w1[i] + w2[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn tcont_bounded(seed in any::<u64>()) {
            let mut rng = crate::synth::SplitMix::new(seed);
            let shape = Shape::new(4, 5, 5).unwrap();
            let pred = VideoVolume::from_fn(shape, |_, _, _| rng.next_f64()).unwrap();
            let gt = VideoVolume::from_fn(shape, |_, _, _| if rng.coin() { 1.0 } else { 0.0 }).unwrap();
            let flow = FlowField::new(
                VideoVolume::from_fn(shape, |_, _, _| 3.0 * rng.next_f64() - 1.5).unwrap(),
                VideoVolume::from_fn(shape, |_, _, _| 3.0 * rng.next_f64() - 1.5).unwrap(),
            ).unwrap();
            let r = tcont(&pred, &gt, &flow, &flow, 0.5).unwrap();
            prop_assert!(r.per_frame.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mean = r.per_frame.iter().sum::<f64>() / 2.0;
            prop_assert!((r.mean - mean).abs() < 1e-12);
        }
    }
}
