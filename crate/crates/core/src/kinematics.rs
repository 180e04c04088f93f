//! Motion layout, 6D rotations, forward kinematics and the kinematic losses.
//!
//! A motion frame is `[foot_contact: 4 | root_translation: 3 | rot6d: J×6]`.
//! Each 6D rotation stores the first two columns of the joint's local
//! rotation matrix; the third is recovered by Gram–Schmidt and a cross
//! product.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const CONTACT_DIM: usize = 4;
pub const ROOT_OFFSET: usize = 4;
pub const ROT_OFFSET: usize = 7;

/// Channel count of a motion frame with `joints` joints.
pub const fn motion_dim(joints: usize) -> usize {
    ROT_OFFSET + 6 * joints
}

pub type Mat3<S> = [[S; 3]; 3];

const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Tensor<f32>,
    pub fps: f64,
    joints: usize,
}

impl MotionSequence {
    pub fn new(frames: Tensor<f32>, fps: f64, joints: usize) -> Result<Self> {
        let (l, d) = frames.dims();
        if d != motion_dim(joints) {
            return Err(Error::Shape { expected: vec![l, motion_dim(joints)], got: vec![l, d] });
        }
        if l < 2 {
            return Err(Error::TooShort { needed: 2, got: l });
        }
        if let Some(i) = frames.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { frame: i / d, channel: i % d });
        }
        Ok(Self { frames, fps, joints })
    }

    /// Joint count implied by a channel count, if the layout fits.
    pub fn joints_for_dim(d: usize) -> Option<usize> {
        (d >= ROT_OFFSET && (d - ROT_OFFSET) % 6 == 0).then(|| (d - ROT_OFFSET) / 6)
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Ground-truth contact labels must be binary.
    pub fn check_binary_contacts(&self) -> Result<()> {
        for t in 0..self.len() {
            for c in 0..CONTACT_DIM {
                let v = self.frames.at(t, c);
                if v != 0.0 && v != 1.0 {
                    return Err(Error::OutOfRange(alloc::format!("contact label {v} at frame {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        let d = self.dim();
        let data = self.frames.data()[start * d..(start + len) * d].to_vec();
        Self { frames: Tensor::from_parts(vec![len, d], data), fps: self.fps, joints: self.joints }
    }
}

/// Kinematic tree with bone offsets in meters.
///
/// Joints are stored in topological order (`parents[j] < j`, root at 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joints: usize,
    pub parents: Vec<i32>,
    pub offsets: Vec<[f64; 3]>,
    /// Left heel, right heel, left toe, right toe.
    pub contact_joints: [usize; 4],
}

impl Skeleton {
    pub fn new(parents: Vec<i32>, offsets: Vec<[f64; 3]>, contact_joints: [usize; 4]) -> Result<Self> {
        let s = Self { joints: parents.len(), parents, offsets, contact_joints };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.joints == 0 || self.parents.len() != self.joints || self.offsets.len() != self.joints {
            return bad(alloc::format!(
                "skeleton with {} joints has {} parents and {} offsets",
                self.joints,
                self.parents.len(),
                self.offsets.len()
            ));
        }
        if self.parents[0] != -1 {
            return bad("joint 0 must be the root (parent -1)".into());
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return bad(alloc::format!("joint {j} has parent {p}; parents must precede children"));
            }
        }
        if self.offsets.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite bone offset".into());
        }
        if self.contact_joints.iter().any(|&c| c >= self.joints) {
            return bad("contact joint out of range".into());
        }
        Ok(())
    }

    /// 24-joint SMPL topology with approximate rest-pose offsets.
    pub fn smpl24() -> Self {
        let parents = vec![-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.059, -0.082, -0.005],
            [-0.060, -0.091, -0.002],
            [0.004, 0.124, -0.038],
            [0.043, -0.386, 0.008],
            [-0.043, -0.383, -0.005],
            [0.004, 0.138, 0.028],
            [-0.015, -0.427, -0.037],
            [0.019, -0.420, -0.034],
            [-0.002, 0.056, 0.002],
            [0.041, -0.060, 0.122],
            [-0.035, -0.062, 0.130],
            [-0.013, 0.212, -0.033],
            [0.072, 0.114, -0.019],
            [-0.083, 0.112, -0.024],
            [0.010, 0.089, 0.050],
            [0.123, 0.045, -0.019],
            [-0.113, 0.047, -0.009],
            [0.255, -0.014, -0.027],
            [-0.261, -0.014, -0.021],
            [0.266, 0.013, -0.001],
            [-0.269, 0.007, -0.006],
            [0.087, -0.010, -0.016],
            [-0.089, -0.009, -0.010],
        ];
        Self { joints: 24, parents, offsets, contact_joints: [7, 8, 10, 11] }
    }

    /// Root plus a two-bone chain along +x; contacts reuse the two children.
    pub fn toy3() -> Self {
        Self {
            joints: 3,
            parents: vec![-1, 0, 1],
            offsets: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            contact_joints: [1, 2, 1, 2],
        }
    }
}

fn norm3<S: Real>(v: [S; 3]) -> S {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot3<S: Real>(a: [S; 3], b: [S; 3]) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3<S: Real>(a: [S; 3], b: [S; 3]) -> [S; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn axpy3<S: Real>(a: S, x: [S; 3], y: [S; 3]) -> [S; 3] {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

fn scale3<S: Real>(a: S, x: [S; 3]) -> [S; 3] {
    [a * x[0], a * x[1], a * x[2]]
}

fn matmul3<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, o) in row.iter_mut().enumerate() {
            *o = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

fn matvec3<S: Real>(m: &Mat3<S>, v: [S; 3]) -> [S; 3] {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

fn transpose3<S: Real>(m: &Mat3<S>) -> Mat3<S> {
    [[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]]
}

/// Gram–Schmidt intermediates of one 6D rotation.
#[derive(Clone, Copy)]
struct Rot6d<S> {
    a: [S; 3],
    b: [S; 3],
    b1: [S; 3],
    na: S,
    nb: S,
}

impl<S: Real> Rot6d<S> {
    fn build(r6: &[S]) -> Option<Self> {
        let a1 = [r6[0], r6[1], r6[2]];
        let b1 = [r6[3], r6[4], r6[5]];
        let na = norm3(a1);
        if !(na.f64() > DEGENERATE_NORM) {
            return None;
        }
        let a = scale3(S::one() / na, a1);
        let b2 = axpy3(-dot3(a, b1), a, b1);
        let nb = norm3(b2);
        if !(nb.f64() > DEGENERATE_NORM) {
            return None;
        }
        let b = scale3(S::one() / nb, b2);
        Some(Self { a, b, b1, na, nb })
    }

    fn matrix(&self) -> Mat3<S> {
        let c = cross3(self.a, self.b);
        let (a, b) = (self.a, self.b);
        [[a[0], b[0], c[0]], [a[1], b[1], c[1]], [a[2], b[2], c[2]]]
    }

    /// Pulls a matrix adjoint back to the 6 raw inputs.
    fn backward(&self, g: &Mat3<S>) -> [S; 6] {
        let (a, b) = (self.a, self.b);
        let col = |c: usize| [g[0][c], g[1][c], g[2][c]];
        let (mut ga, mut gb, gc) = (col(0), col(1), col(2));
        // c = a × b
        let t = cross3(b, gc);
        ga = [ga[0] + t[0], ga[1] + t[1], ga[2] + t[2]];
        let t = cross3(gc, a);
        gb = [gb[0] + t[0], gb[1] + t[1], gb[2] + t[2]];
        // b = b2 / |b2|
        let gb2 = scale3(S::one() / self.nb, axpy3(-dot3(b, gb), b, gb));
        // b2 = b1 − (a·b1) a
        let ab1 = dot3(a, self.b1);
        let agb2 = dot3(a, gb2);
        let gb1 = axpy3(-agb2, a, gb2);
        ga = axpy3(-ab1, gb2, ga);
        ga = axpy3(-agb2, self.b1, ga);
        // a = a1 / |a1|
        let ga1 = scale3(S::one() / self.na, axpy3(-dot3(a, ga), a, ga));
        [ga1[0], ga1[1], ga1[2], gb1[0], gb1[1], gb1[2]]
    }
}

/// Rotation matrix from a 6D representation (columns `a`, `b`, `a×b`).
pub fn rot6d_to_matrix<S: Real>(r6: &[S; 6]) -> Result<Mat3<S>> {
    Rot6d::build(r6).map(|r| r.matrix()).ok_or(Error::DegenerateRotation { frame: 0, joint: 0 })
}

/// The 6D representation of a rotation matrix (its first two columns).
pub fn matrix_to_rot6d<S: Real>(m: &Mat3<S>) -> [S; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Rotation by `angle` radians about a unit `axis` (Rodrigues).
pub fn axis_angle<S: Real>(axis: [S; 3], angle: S) -> Mat3<S> {
    let (s, c) = (angle.sin(), angle.cos());
    let t = S::one() - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Per-frame FK intermediates kept for the backward pass.
struct FrameFk<S> {
    rots: Vec<Rot6d<S>>,
    locals: Vec<Mat3<S>>,
    globals: Vec<Mat3<S>>,
}

fn fk_frame<S: Real>(row: &[S], skel: &Skeleton, out: &mut [S]) -> core::result::Result<FrameFk<S>, usize> {
    let j = skel.joints;
    let mut rots = Vec::with_capacity(j);
    let mut locals = Vec::with_capacity(j);
    let mut globals: Vec<Mat3<S>> = Vec::with_capacity(j);
    for jj in 0..j {
        let r6 = &row[ROT_OFFSET + 6 * jj..ROT_OFFSET + 6 * jj + 6];
        let rot = Rot6d::build(r6).ok_or(jj)?;
        let local = rot.matrix();
        let p = skel.parents[jj];
        let (global, pos) = if p < 0 {
            (local, [row[ROOT_OFFSET], row[ROOT_OFFSET + 1], row[ROOT_OFFSET + 2]])
        } else {
            let p = p as usize;
            let off = skel.offsets[jj].map(S::of);
            let pp = [out[3 * p], out[3 * p + 1], out[3 * p + 2]];
            let moved = matvec3(&globals[p], off);
            (matmul3(&globals[p], &local), [pp[0] + moved[0], pp[1] + moved[1], pp[2] + moved[2]])
        };
        out[3 * jj..3 * jj + 3].copy_from_slice(&pos);
        rots.push(rot);
        locals.push(local);
        globals.push(global);
    }
    Ok(FrameFk { rots, locals, globals })
}

fn check_layout(d: usize, skel: &Skeleton) -> Result<()> {
    if d != motion_dim(skel.joints) {
        return Err(Error::Shape { expected: vec![motion_dim(skel.joints)], got: vec![d] });
    }
    Ok(())
}

/// Global joint positions `[L × 3J]` (joint `j` in columns `3j..3j+3`) from a
/// raw `[L × d]` motion matrix.
pub fn forward_kinematics_raw<S: Real>(frames: &Tensor<S>, skel: &Skeleton) -> Result<Tensor<S>> {
    let (l, d) = frames.dims();
    check_layout(d, skel)?;
    let j3 = 3 * skel.joints;
    let mut out = vec![S::zero(); l * j3];
    for t in 0..l {
        fk_frame(frames.row(t), skel, &mut out[t * j3..(t + 1) * j3])
            .map_err(|joint| Error::DegenerateRotation { frame: t, joint })?;
    }
    Ok(Tensor::from_parts(vec![l, j3], out))
}

/// Joint positions `[L × 3J]` of a motion sequence.
pub fn forward_kinematics(motion: &MotionSequence, skel: &Skeleton) -> Result<Tensor<f64>> {
    if motion.joints() != skel.joints {
        return Err(Error::Shape { expected: vec![motion_dim(skel.joints)], got: vec![motion.dim()] });
    }
    forward_kinematics_raw(&motion.frames().cast::<f64>(), skel)
}

struct FkOp {
    skel: Arc<Skeleton>,
}

impl<S: Real> CustomOp<S> for FkOp {
    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Tensor<S>> {
        let x = inputs[0];
        let skel = &*self.skel;
        let (l, d) = x.dims();
        let nj = skel.joints;
        let mut gx = vec![S::zero(); l * d];
        let mut pos = vec![S::zero(); 3 * nj];
        for t in 0..l {
            let fk = fk_frame(x.row(t), skel, &mut pos).expect("degenerate rotation in FK backward");
            let mut gp: Vec<[S; 3]> = grad.row(t).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let mut gg = vec![[[S::zero(); 3]; 3]; nj];
            let gxr = &mut gx[t * d..(t + 1) * d];
            for j in (0..nj).rev() {
                let p = skel.parents[j];
                let g_local = if p < 0 {
                    gxr[ROOT_OFFSET..ROOT_OFFSET + 3].copy_from_slice(&gp[j]);
                    gg[j]
                } else {
                    let p = p as usize;
                    let off = skel.offsets[j].map(S::of);
                    let gpj = gp[j];
                    for r in 0..3 {
                        gp[p][r] += gpj[r];
                        for c in 0..3 {
                            gg[p][r][c] += gpj[r] * off[c];
                        }
                    }
                    // global_j = global_p · local_j
                    let lt = transpose3(&fk.locals[j]);
                    let add = matmul3(&gg[j], &lt);
                    for r in 0..3 {
                        for c in 0..3 {
                            gg[p][r][c] += add[r][c];
                        }
                    }
                    matmul3(&transpose3(&fk.globals[p]), &gg[j])
                };
                let g6 = fk.rots[j].backward(&g_local);
                gxr[ROT_OFFSET + 6 * j..ROT_OFFSET + 6 * j + 6].copy_from_slice(&g6);
            }
        }
        vec![Tensor::from_parts(vec![l, d], gx)]
    }
}

/// Records forward kinematics of a raw `[L × d]` motion on the tape.
pub fn fk_on_tape<S: Real>(tape: &mut Tape<'_, S>, motion: Var, skel: &Arc<Skeleton>) -> Result<Var> {
    let out = forward_kinematics_raw(tape.value(motion), skel)?;
    Ok(tape.custom(&[motion], out, Box::new(FkOp { skel: skel.clone() })))
}

/// Forward differences along time scaled by `fps`, applied `order` times.
pub fn time_diff<S: Real>(x: &Tensor<S>, order: usize, fps: f64) -> Result<Tensor<S>> {
    let (l, k) = x.dims();
    if !(1..=2).contains(&order) {
        return Err(Error::Invalid(alloc::format!("time_diff order {order} (expected 1 or 2)")));
    }
    if l <= order {
        return Err(Error::TooShort { needed: order + 1, got: l });
    }
    let f = S::of(fps);
    let mut cur = x.clone();
    for _ in 0..order {
        let r = cur.rows();
        let d = cur.data();
        let next = (0..(r - 1) * k).map(|i| (d[i + k] - d[i]) * f).collect();
        cur = Tensor::from_parts(vec![r - 1, k], next);
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_joint: f64,
    pub lambda_vel: f64,
    pub lambda_contact: f64,
    pub lambda_acc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_joint: 0.646, lambda_vel: 2.964, lambda_contact: 10.942, lambda_acc: 1.0 }
    }
}

impl LossWeights {
    pub const ZERO: Self = Self { lambda_joint: 0.0, lambda_vel: 0.0, lambda_contact: 0.0, lambda_acc: 0.0 };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub simple: f64,
    pub joint: f64,
    pub vel: f64,
    pub acc: f64,
    pub contact: f64,
    pub kin_total: f64,
    pub total: f64,
}

/// Kinematic loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct KinematicTerms {
    pub joint: Var,
    pub vel: Var,
    pub acc: Option<Var>,
    pub contact: Var,
    pub total: Var,
}

impl KinematicTerms {
    pub fn read<S: Real>(&self, tape: &Tape<'_, S>) -> LossBreakdown {
        let joint = tape.scalar(self.joint).f64();
        let vel = tape.scalar(self.vel).f64();
        let acc = self.acc.map_or(0.0, |a| tape.scalar(a).f64());
        let contact = tape.scalar(self.contact).f64();
        let kin_total = tape.scalar(self.total).f64();
        LossBreakdown { simple: 0.0, joint, vel, acc, contact, kin_total, total: kin_total }
    }
}

/// Records `L_kin` between a constant ground truth and a predicted raw motion.
///
/// `L_joint` is the per-frame mean of squared FK position errors; `L_vel` and
/// `L_acc` compare first and second `fps`-scaled differences of the raw pose
/// vectors; `L_contact` penalizes contact-joint displacement weighted by the
/// predicted (clamped) contact labels. `L_acc` is zero for two-frame inputs.
pub fn kinematic_loss_on_tape<S: Real>(
    tape: &mut Tape<'_, S>,
    gt: &Tensor<S>,
    pred: Var,
    skel: &Arc<Skeleton>,
    fps: f64,
    w: &LossWeights,
) -> Result<KinematicTerms> {
    let (l, d) = gt.dims();
    if tape.value(pred).dims() != (l, d) {
        return Err(Error::Shape { expected: vec![l, d], got: tape.value(pred).shape().to_vec() });
    }
    check_layout(d, skel)?;
    if l < 2 {
        return Err(Error::TooShort { needed: 2, got: l });
    }
    let per_frame = |n: usize| S::one() / S::of(n as f64);
    let f = S::of(fps);

    let gt_pos = tape.constant(forward_kinematics_raw(gt, skel)?);
    let pred_pos = fk_on_tape(tape, pred, skel)?;
    let diff = tape.sub(pred_pos, gt_pos);
    let ss = tape.sum_squares(diff);
    let joint = tape.scale(ss, per_frame(l));

    let gt_v = time_diff(gt, 1, fps)?;
    let gt_v_var = tape.constant(gt_v.clone());
    let pred_v = tape.row_diff(pred, f);
    let diff = tape.sub(pred_v, gt_v_var);
    let ss = tape.sum_squares(diff);
    let vel = tape.scale(ss, per_frame(l - 1));

    let acc = if l >= 3 {
        let gt_a = tape.constant(time_diff(&gt_v, 1, fps)?);
        let pred_a = tape.row_diff(pred_v, f);
        let diff = tape.sub(pred_a, gt_a);
        let ss = tape.sum_squares(diff);
        Some(tape.scale(ss, per_frame(l - 2)))
    } else {
        None
    };

    let cols: Vec<usize> = skel.contact_joints.iter().flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2]).collect();
    let feet = tape.gather_cols(pred_pos, &cols);
    let disp = tape.row_diff(feet, S::one());
    let labels = tape.slice_cols(pred, 0, CONTACT_DIM);
    let labels = tape.clamp01(labels);
    let labels = tape.slice_rows(labels, 0, l - 1);
    let labels = tape.gather_cols(labels, &[0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    let masked = tape.mul(disp, labels);
    let ss = tape.sum_squares(masked);
    let contact = tape.scale(ss, per_frame(l - 1));

    let mut total = tape.scale(joint, S::of(w.lambda_joint));
    for (term, lambda) in [(Some(vel), w.lambda_vel), (Some(contact), w.lambda_contact), (acc, w.lambda_acc)] {
        if let Some(term) = term {
            let t = tape.scale(term, S::of(lambda));
            total = tape.add(total, t);
        }
    }
    Ok(KinematicTerms { joint, vel, acc, contact, total })
}

/// Evaluates every kinematic loss term between two motions.
pub fn loss_kinematic(
    gt: &MotionSequence,
    pred: &MotionSequence,
    skel: &Skeleton,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if gt.frames().shape() != pred.frames().shape() {
        return Err(Error::Shape { expected: gt.frames().shape().to_vec(), got: pred.frames().shape().to_vec() });
    }
    if gt.fps != pred.fps {
        return Err(Error::Invalid(alloc::format!("fps mismatch: {} vs {}", gt.fps, pred.fps)));
    }
    let skel = Arc::new(skel.clone());
    let mut tape = Tape::<f64>::new(&[]);
    let p = tape.constant(pred.frames().cast());
    let terms = kinematic_loss_on_tape(&mut tape, &gt.frames().cast(), p, &skel, gt.fps, w)?;
    Ok(terms.read(&tape))
}
