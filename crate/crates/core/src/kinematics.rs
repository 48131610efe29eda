//! Dual-arm kinematics and statics: forward kinematics, geometric Jacobians,
//! recursive Newton-Euler inverse dynamics and weighted damped least-squares
//! inverse kinematics.

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix6x1, SMatrix, SVector, Translation3, Unit, UnitQuaternion,
    Vector3,
};
use serde::Deserialize;
use thiserror::Error;

use crate::scenario_db::{ARM_JOINTS, NUM_JOINTS};

pub type JointVector = SVector<f64, NUM_JOINTS>;
pub type ArmVector = SVector<f64, ARM_JOINTS>;
/// Rows 0-2 linear velocity, rows 3-5 angular velocity.
pub type ArmJacobian = SMatrix<f64, 6, ARM_JOINTS>;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("model file: {0}")]
    Model(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} joint values, got {got}")]
    Length { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    /// Offset of this arm's joints in a [`JointVector`].
    pub fn offset(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => ARM_JOINTS,
        }
    }
}

/// End-effector pose in the torso frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose6D {
    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }

    /// `[x, y, z, qw, qx, qy, qz]`; the quaternion is normalized.
    pub fn from_array(a: [f64; 7]) -> Result<Self, KinematicsError> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::NonFinite("pose"));
        }
        let q = nalgebra::Quaternion::new(a[3], a[4], a[5], a[6]);
        if q.norm() < 1e-12 {
            return Err(KinematicsError::NonFinite("pose quaternion (zero norm)"));
        }
        Ok(Self {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: UnitQuaternion::from_quaternion(q),
        })
    }

    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Translational and rotational (rotation vector) error of `self`
    /// relative to `target`, both in the torso frame.
    pub fn error_to(&self, target: &Pose6D) -> (Vector3<f64>, Vector3<f64>) {
        let dp = target.position - self.position;
        let dtheta = (target.orientation * self.orientation.inverse()).scaled_axis();
        (dp, dtheta)
    }
}

/// One revolute joint and the link it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub axis: Unit<Vector3<f64>>,
    pub offset: Vector3<f64>,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub armature: f64,
    pub limits: (f64, f64),
}

impl Joint {
    pub fn revolute(
        name: &str,
        axis: Vector3<f64>,
        offset: Vector3<f64>,
        mass: f64,
        com: Vector3<f64>,
    ) -> Self {
        Self {
            name: name.to_string(),
            axis: Unit::new_normalize(axis),
            offset,
            mass,
            com,
            armature: 0.0,
            limits: (-std::f64::consts::PI, std::f64::consts::PI),
        }
    }
}

/// Serial chain of revolute joints fixed to the torso.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub base: Vector3<f64>,
    pub joints: Vec<Joint>,
    pub tool: Vector3<f64>,
}

/// Per-joint world quantities for one configuration.
struct ChainFrames {
    frames: Vec<Isometry3<f64>>,
    axes: Vec<Vector3<f64>>,
    end_effector: Isometry3<f64>,
}

impl Chain {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    fn frames(&self, q: &[f64]) -> ChainFrames {
        debug_assert_eq!(q.len(), self.joints.len());
        let mut t =
            Isometry3::from_parts(Translation3::from(self.base), UnitQuaternion::identity());
        let mut frames = Vec::with_capacity(q.len());
        let mut axes = Vec::with_capacity(q.len());
        for (joint, &angle) in self.joints.iter().zip(q) {
            t *= Translation3::from(joint.offset);
            t *= UnitQuaternion::from_axis_angle(&joint.axis, angle);
            axes.push(t.rotation * joint.axis.into_inner());
            frames.push(t);
        }
        let end_effector = t * Translation3::from(self.tool);
        ChainFrames {
            frames,
            axes,
            end_effector,
        }
    }

    pub fn end_effector(&self, q: &[f64]) -> Isometry3<f64> {
        self.frames(q).end_effector
    }

    /// Geometric Jacobian of the tool point, 6 x dof.
    pub fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let f = self.frames(q);
        let p_ee = f.end_effector.translation.vector;
        let mut j = DMatrix::zeros(6, self.dof());
        for i in 0..self.dof() {
            let z = f.axes[i];
            let lin = z.cross(&(p_ee - f.frames[i].translation.vector));
            j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        j
    }

    /// Link centres of mass in the torso frame.
    pub fn com_positions(&self, q: &[f64]) -> Vec<Vector3<f64>> {
        let f = self.frames(q);
        self.joints
            .iter()
            .zip(&f.frames)
            .map(|(j, t)| t.transform_point(&j.com.into()).coords)
            .collect()
    }

    /// Gravitational potential energy of all links.
    pub fn potential_energy(&self, q: &[f64], gravity: &Vector3<f64>) -> f64 {
        self.joints
            .iter()
            .zip(self.com_positions(q))
            .map(|(j, c)| -j.mass * gravity.dot(&c))
            .sum()
    }

    /// Recursive Newton-Euler inverse dynamics for point-mass links.
    ///
    /// The base is fixed; gravity enters as a fictitious upward acceleration
    /// of the base.
    pub fn inverse_dynamics(
        &self,
        q: &[f64],
        qd: &[f64],
        qdd: &[f64],
        gravity: &Vector3<f64>,
    ) -> DVector<f64> {
        let n = self.dof();
        let f = self.frames(q);
        let origins: Vec<Vector3<f64>> = f.frames.iter().map(|t| t.translation.vector).collect();
        let coms = self.com_positions(q);

        // outward pass
        let mut omega = Vector3::zeros();
        let mut alpha = Vector3::zeros();
        let mut acc = -gravity;
        let mut prev_origin = self.base;
        let mut link_force = Vec::with_capacity(n);
        for i in 0..n {
            let r = origins[i] - prev_origin;
            acc += alpha.cross(&r) + omega.cross(&omega.cross(&r));
            let z = f.axes[i];
            alpha += z * qdd[i] + omega.cross(&(z * qd[i]));
            omega += z * qd[i];
            let rc = coms[i] - origins[i];
            let acc_com = acc + alpha.cross(&rc) + omega.cross(&omega.cross(&rc));
            link_force.push(acc_com * self.joints[i].mass);
            prev_origin = origins[i];
        }

        // inward pass
        let mut tau = DVector::zeros(n);
        let mut force = Vector3::zeros();
        let mut moment = Vector3::zeros();
        for i in (0..n).rev() {
            let lever_next = if i + 1 < n {
                origins[i + 1] - origins[i]
            } else {
                Vector3::zeros()
            };
            moment =
                moment + lever_next.cross(&force) + (coms[i] - origins[i]).cross(&link_force[i]);
            force += link_force[i];
            tau[i] = moment.dot(&f.axes[i]);
        }
        tau
    }

    pub fn gravity_torques(&self, q: &[f64], gravity: &Vector3<f64>) -> DVector<f64> {
        let zeros = vec![0.0; self.dof()];
        self.inverse_dynamics(q, &zeros, &zeros, gravity)
    }

    /// Diagonal of the joint-space mass matrix (links only, no armature).
    pub fn mass_matrix_diagonal(&self, q: &[f64]) -> DVector<f64> {
        let n = self.dof();
        let zeros = vec![0.0; n];
        DVector::from_fn(n, |i, _| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            self.inverse_dynamics(q, &zeros, &e, &Vector3::zeros())[i]
        })
    }

    fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits.0, j.limits.1);
        }
    }
}

/// Kinematic and inertial description of the two 7-joint arms.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmModel {
    pub left: Chain,
    pub right: Chain,
    pub gravity: Vector3<f64>,
    pub home: JointVector,
}

#[derive(Deserialize)]
struct JointFile {
    name: String,
    axis: [f64; 3],
    offset: [f64; 3],
    mass: f64,
    com: [f64; 3],
    #[serde(default)]
    armature: f64,
    limits: [f64; 2],
}

#[derive(Deserialize)]
struct ChainFile {
    base: [f64; 3],
    tool: [f64; 3],
    home: Vec<f64>,
    joints: Vec<JointFile>,
}

#[derive(Deserialize)]
struct ModelFile {
    gravity: [f64; 3],
    left: ChainFile,
    right: ChainFile,
}

impl ArmModel {
    /// Parses the TOML model file format.
    pub fn from_toml(text: &str) -> Result<Self, KinematicsError> {
        let file: ModelFile =
            toml::from_str(text).map_err(|e| KinematicsError::Model(e.to_string()))?;
        let (left, left_home) = build_chain("left", file.left)?;
        let (right, right_home) = build_chain("right", file.right)?;
        let mut home = JointVector::zeros();
        home.fixed_rows_mut::<ARM_JOINTS>(0).copy_from(&left_home);
        home.fixed_rows_mut::<ARM_JOINTS>(ARM_JOINTS)
            .copy_from(&right_home);
        let gravity = Vector3::from(file.gravity);
        if !gravity.iter().all(|g| g.is_finite()) {
            return Err(KinematicsError::Model("gravity must be finite".into()));
        }
        Ok(Self {
            left,
            right,
            gravity,
            home,
        })
    }

    pub fn chain(&self, side: Side) -> &Chain {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn arm(q: &JointVector, side: Side) -> ArmVector {
        q.fixed_rows::<ARM_JOINTS>(side.offset()).into_owned()
    }

    pub fn joints(&self) -> impl Iterator<Item = &Joint> {
        self.left.joints.iter().chain(&self.right.joints)
    }

    pub fn clamp_to_limits(&self, q: &JointVector) -> JointVector {
        let mut out = *q;
        for side in Side::BOTH {
            let o = side.offset();
            self.chain(side)
                .clamp(&mut out.as_mut_slice()[o..o + ARM_JOINTS]);
        }
        out
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        self.joints()
            .zip(q.iter())
            .all(|(j, &v)| v >= j.limits.0 && v <= j.limits.1)
    }

    pub fn armature(&self) -> JointVector {
        JointVector::from_iterator(self.joints().map(|j| j.armature))
    }

    /// Per-joint lumped inertia at `q`: mass-matrix diagonal plus armature.
    pub fn lumped_inertia(&self, q: &JointVector) -> JointVector {
        let mut out = self.armature();
        for side in Side::BOTH {
            let arm = Self::arm(q, side);
            let diag = self.chain(side).mass_matrix_diagonal(arm.as_slice());
            for i in 0..ARM_JOINTS {
                out[side.offset() + i] += diag[i];
            }
        }
        out
    }
}

fn build_chain(side: &str, file: ChainFile) -> Result<(Chain, ArmVector), KinematicsError> {
    if file.joints.len() != ARM_JOINTS {
        return Err(KinematicsError::Model(format!(
            "{side} chain has {} joints, expected {ARM_JOINTS}",
            file.joints.len()
        )));
    }
    if file.home.len() != ARM_JOINTS {
        return Err(KinematicsError::Model(format!(
            "{side} home has {} values, expected {ARM_JOINTS}",
            file.home.len()
        )));
    }
    let mut joints = Vec::with_capacity(ARM_JOINTS);
    for j in file.joints {
        let axis = Vector3::from(j.axis);
        if !(axis.norm() > 1e-9) {
            return Err(KinematicsError::Model(format!("{}: zero axis", j.name)));
        }
        if !(j.mass > 0.0) {
            return Err(KinematicsError::Model(format!(
                "{}: mass must be positive",
                j.name
            )));
        }
        if !(j.armature >= 0.0) {
            return Err(KinematicsError::Model(format!(
                "{}: negative armature",
                j.name
            )));
        }
        if !(j.limits[0] < j.limits[1]) {
            return Err(KinematicsError::Model(format!(
                "{}: empty limit range",
                j.name
            )));
        }
        joints.push(Joint {
            name: j.name,
            axis: Unit::new_normalize(axis),
            offset: Vector3::from(j.offset),
            mass: j.mass,
            com: Vector3::from(j.com),
            armature: j.armature,
            limits: (j.limits[0], j.limits[1]),
        });
    }
    let home = ArmVector::from_column_slice(&file.home);
    let chain = Chain {
        base: Vector3::from(file.base),
        joints,
        tool: Vector3::from(file.tool),
    };
    for (j, &h) in chain.joints.iter().zip(home.iter()) {
        if h < j.limits.0 || h > j.limits.1 {
            return Err(KinematicsError::Model(format!(
                "{}: home outside limits",
                j.name
            )));
        }
    }
    Ok((chain, home))
}

fn check_finite(q: &JointVector) -> Result<(), KinematicsError> {
    if q.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(KinematicsError::NonFinite("joint vector"))
    }
}

/// End-effector poses of both arms in the torso frame.
pub fn forward_kinematics(model: &ArmModel, q: &JointVector) -> (Pose6D, Pose6D) {
    let pose = |side| {
        Pose6D::from_isometry(
            &model
                .chain(side)
                .end_effector(ArmModel::arm(q, side).as_slice()),
        )
    };
    (pose(Side::Left), pose(Side::Right))
}

/// Geometric Jacobian of one arm's end-effector.
pub fn jacobian(model: &ArmModel, q: &JointVector, side: Side) -> ArmJacobian {
    let j = model
        .chain(side)
        .jacobian(ArmModel::arm(q, side).as_slice());
    ArmJacobian::from_fn(|r, c| j[(r, c)])
}

/// The same Jacobian laid out over all 14 joints; the other arm's columns
/// are zero.
pub fn jacobian_full(model: &ArmModel, q: &JointVector, side: Side) -> SMatrix<f64, 6, NUM_JOINTS> {
    let j = jacobian(model, q, side);
    let mut full = SMatrix::<f64, 6, NUM_JOINTS>::zeros();
    full.fixed_view_mut::<6, ARM_JOINTS>(0, side.offset())
        .copy_from(&j);
    full
}

/// Joint torques that statically balance gravity at `q`.
pub fn gravity_torques(model: &ArmModel, q: &JointVector) -> JointVector {
    let mut tau = JointVector::zeros();
    for side in Side::BOTH {
        let t = model
            .chain(side)
            .gravity_torques(ArmModel::arm(q, side).as_slice(), &model.gravity);
        tau.fixed_rows_mut::<ARM_JOINTS>(side.offset())
            .copy_from_slice(t.as_slice());
    }
    tau
}

pub fn potential_energy(model: &ArmModel, q: &JointVector) -> f64 {
    Side::BOTH
        .iter()
        .map(|&s| {
            model
                .chain(s)
                .potential_energy(ArmModel::arm(q, s).as_slice(), &model.gravity)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkWeights {
    pub w_trans: f64,
    pub w_rot: f64,
    pub w_reg: f64,
    pub w_smooth: f64,
}

impl Default for IkWeights {
    fn default() -> Self {
        Self {
            w_trans: 1.0,
            w_rot: 0.5,
            w_reg: 1e-3,
            w_smooth: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkOptions {
    pub weights: IkWeights,
    /// Levenberg damping added to the normal equations.
    pub damping: f64,
    /// Stop once the task residual is at or below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            weights: IkWeights::default(),
            damping: 1e-4,
            tol: 1e-5,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointVector,
    /// sqrt(|dp|^2 + |dtheta|^2) summed over both arms.
    pub residual: f64,
    pub iterations: usize,
    /// Cost after each accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

struct ArmProblem<'a> {
    chain: &'a Chain,
    target: &'a Pose6D,
    home: ArmVector,
    prev: ArmVector,
    w: IkWeights,
}

impl ArmProblem<'_> {
    fn task_error(&self, q: &ArmVector) -> (Vector3<f64>, Vector3<f64>) {
        Pose6D::from_isometry(&self.chain.end_effector(q.as_slice())).error_to(self.target)
    }

    fn cost(&self, q: &ArmVector) -> f64 {
        let (dp, dth) = self.task_error(q);
        self.w.w_trans * dp.norm_squared()
            + self.w.w_rot * dth.norm_squared()
            + self.w.w_reg * (q - self.home).norm_squared()
            + self.w.w_smooth * (q - self.prev).norm_squared()
    }

    /// Gauss-Newton step on the stacked weighted residual.
    fn step(&self, q: &ArmVector, damping: f64) -> ArmVector {
        let (dp, dth) = self.task_error(q);
        let j = self.chain.jacobian(q.as_slice());
        let (st, sr) = (self.w.w_trans.sqrt(), self.w.w_rot.sqrt());
        let mut jw = ArmJacobian::from_fn(|r, c| j[(r, c)]);
        jw.fixed_rows_mut::<3>(0).scale_mut(st);
        jw.fixed_rows_mut::<3>(3).scale_mut(sr);
        let mut e = Matrix6x1::zeros();
        e.fixed_rows_mut::<3>(0).copy_from(&(dp * st));
        e.fixed_rows_mut::<3>(3).copy_from(&(dth * sr));
        let mut jtj = jw.transpose() * jw;
        let mut jtr = jw.transpose() * e;
        let diag = self.w.w_reg + self.w.w_smooth + damping;
        for i in 0..ARM_JOINTS {
            jtj[(i, i)] += diag;
        }
        jtr += (self.home - q) * self.w.w_reg + (self.prev - q) * self.w.w_smooth;
        jtj.cholesky()
            .map(|c| c.solve(&jtr))
            .unwrap_or_else(ArmVector::zeros)
    }
}

/// Damped least-squares IK for both arms.
///
/// Minimizes `w_trans |dp|^2 + w_rot |dtheta|^2 + w_reg |q - q_home|^2 +
/// w_smooth |q - q_prev|^2` per arm, starting from `q_prev`, with a
/// backtracking line search so that the cost never increases. Iteration
/// stops when the task residual reaches `tol`, when no step decreases the
/// cost, or after `max_iters`. Joint limits are enforced by clamping.
pub fn solve_ik(
    model: &ArmModel,
    targets: (&Pose6D, &Pose6D),
    q_prev: &JointVector,
    opts: &IkOptions,
) -> Result<IkSolution, KinematicsError> {
    if !targets.0.is_finite() || !targets.1.is_finite() {
        return Err(KinematicsError::NonFinite("IK target"));
    }
    check_finite(q_prev)?;
    if !(opts.weights.w_trans > 0.0) {
        return Err(KinematicsError::Model("w_trans must be positive".into()));
    }

    let mut q_out = JointVector::zeros();
    let mut residual_sq = 0.0;
    let mut iterations = 0;
    let mut history = vec![0.0; 1];
    for (side, target) in [(Side::Left, targets.0), (Side::Right, targets.1)] {
        let problem = ArmProblem {
            chain: model.chain(side),
            target,
            home: ArmModel::arm(&model.home, side),
            prev: ArmModel::arm(q_prev, side),
            w: opts.weights,
        };
        let (q, iters, costs) = solve_arm(&problem, opts);
        let (dp, dth) = problem.task_error(&q);
        residual_sq += dp.norm_squared() + dth.norm_squared();
        iterations = iterations.max(iters);
        q_out
            .fixed_rows_mut::<ARM_JOINTS>(side.offset())
            .copy_from(&q);
        // combined history: pad the shorter arm with its final cost
        let n = history.len().max(costs.len());
        let last_h = *history.last().unwrap();
        let last_c = *costs.last().unwrap();
        history = (0..n)
            .map(|i| {
                history.get(i).copied().unwrap_or(last_h) + costs.get(i).copied().unwrap_or(last_c)
            })
            .collect();
    }
    Ok(IkSolution {
        q: q_out,
        residual: residual_sq.sqrt(),
        iterations,
        cost_history: history,
    })
}

fn solve_arm(p: &ArmProblem<'_>, opts: &IkOptions) -> (ArmVector, usize, Vec<f64>) {
    let mut q = p.prev;
    p.chain.clamp(q.as_mut_slice());
    let mut cost = p.cost(&q);
    let mut costs = vec![cost];
    let mut iters = 0;
    while iters < opts.max_iters {
        let (dp, dth) = p.task_error(&q);
        if (dp.norm_squared() + dth.norm_squared()).sqrt() <= opts.tol {
            break;
        }
        iters += 1;
        let delta = p.step(&q, opts.damping);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = q + delta * alpha;
            p.chain.clamp(trial.as_mut_slice());
            let c = p.cost(&trial);
            if c < cost {
                accepted = Some((trial, c));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, c)) => {
                let moved = (trial - q).norm();
                q = trial;
                cost = c;
                costs.push(c);
                if moved < 1e-14 {
                    break;
                }
            }
            None => break,
        }
    }
    (q, iters, costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use approx::assert_relative_eq;

    fn single_link() -> Chain {
        Chain {
            base: Vector3::zeros(),
            joints: vec![Joint::revolute(
                "pivot",
                Vector3::y(),
                Vector3::zeros(),
                1.0,
                Vector3::new(0.5, 0.0, 0.0),
            )],
            tool: Vector3::new(1.0, 0.0, 0.0),
        }
    }

    #[test]
    fn single_link_horizontal_gravity_torque() {
        let g = Vector3::new(0.0, 0.0, -9.81);
        let tau = single_link().gravity_torques(&[0.0], &g);
        // link along +x, gravity along -z, axis +y: holding torque is -m g l about +y
        assert_relative_eq!(tau[0].abs(), 4.905, epsilon = 1e-12);
        assert_relative_eq!(tau[0], -4.905, epsilon = 1e-12);
    }

    #[test]
    fn hanging_arm_has_no_gravity_torque() {
        let model = data::arm_model();
        let tau = gravity_torques(&model, &JointVector::zeros());
        assert!(tau.amax() < 1e-12, "{tau}");
    }

    #[test]
    fn fk_is_deterministic() {
        let model = data::arm_model();
        let q = model.home;
        assert_eq!(
            forward_kinematics(&model, &q),
            forward_kinematics(&model, &q)
        );
    }

    #[test]
    fn last_wrist_joint_keeps_tool_position() {
        let model = data::arm_model();
        let mut q = model.home;
        let (l0, r0) = forward_kinematics(&model, &q);
        q[6] += 0.7;
        q[13] -= 1.1;
        let (l1, r1) = forward_kinematics(&model, &q);
        assert_relative_eq!(l0.position, l1.position, epsilon = 1e-12);
        assert_relative_eq!(r0.position, r1.position, epsilon = 1e-12);
        assert!(l0.orientation.angle_to(&l1.orientation) > 0.5);
    }

    #[test]
    fn other_arm_columns_are_zero() {
        let model = data::arm_model();
        let j = jacobian_full(&model, &model.home, Side::Left);
        for c in ARM_JOINTS..NUM_JOINTS {
            assert!(j.column(c).iter().all(|&v| v == 0.0));
        }
        assert!(j.column(0).norm() > 0.0);
    }

    #[test]
    fn stretched_pose_is_singular() {
        let model = data::arm_model();
        let j = jacobian(&model, &JointVector::zeros(), Side::Right);
        let sv = j.singular_values();
        assert_eq!(sv.iter().filter(|&&s| s > 1e-9).count(), 5);
    }

    #[test]
    fn model_rejects_bad_files() {
        let good = data::ARM_MODEL_TOML;
        let bad_mass = good.replacen("mass = 0.25", "mass = -1.0", 1);
        assert!(ArmModel::from_toml(&bad_mass).is_err());
        let bad_home = good.replacen("home = [-0.4, 0.15", "home = [-0.4, 9.0", 1);
        assert!(ArmModel::from_toml(&bad_home).is_err());
        assert!(ArmModel::from_toml("gravity = [0.0, 0.0]").is_err());
    }

    #[test]
    fn ik_rejects_non_finite_target() {
        let model = data::arm_model();
        let (l, mut r) = forward_kinematics(&model, &model.home);
        r.position.x = f64::NAN;
        assert!(solve_ik(&model, (&l, &r), &model.home, &IkOptions::default()).is_err());
    }

    #[test]
    fn lumped_inertia_positive() {
        let model = data::arm_model();
        let inertia = model.lumped_inertia(&model.home);
        assert!(inertia.iter().all(|&i| i > 0.0));
        // armature alone is a lower bound
        for (i, a) in inertia.iter().zip(model.armature().iter()) {
            assert!(i >= a);
        }
    }
}
