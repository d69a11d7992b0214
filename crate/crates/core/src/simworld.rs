//! Deterministic 2.5-D tabletop: objects on a unit table, a gripper with a
//! binary height, two camera views, a scripted expert and a gaze oracle.
//!
//! World→pixel map for the base view (origin top-left, y down):
//! `px = x · 64`, `py = y · 64`. The wrist view is a 2× zoom centred on the
//! gripper: `px = (x − gx) · 128 + 32`, `py = (y − gy) · 128 + 32`.
//! Pixel `(i, j)` covers the square `[i, i+1) × [j, j+1)`; a shape with
//! half-extent `s` centred at `c` covers the pixels whose centres fall in
//! `[c − s, c + s)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BBox, Image, Rgb};

pub const RASTER: usize = 64;
/// World units moved per unit of action delta.
pub const MAX_STEP: f64 = 0.08;
/// Grasp radius and placement tolerance.
pub const REACH_RADIUS: f64 = 0.05;
/// Minimum distance between object centres at world creation.
pub const MIN_SPACING: f64 = 0.15;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const GAZE_DILATION_PX: f64 = 4.0;
/// Threshold above which a continuous z/grip command is treated as issued.
pub const COMMAND_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnvId {
    A,
    B,
    C,
    D,
}

impl EnvId {
    pub const ALL: [EnvId; 4] = [EnvId::A, EnvId::B, EnvId::C, EnvId::D];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["A", "B", "C", "D"][self.index()]
    }

    /// Two-tone checker palette of the table surface.
    pub fn palette(self) -> [Rgb; 2] {
        match self {
            EnvId::A => [[150, 120, 90], [140, 110, 82]],
            EnvId::B => [[110, 130, 110], [100, 120, 100]],
            EnvId::C => [[125, 125, 140], [115, 115, 130]],
            EnvId::D => [[80, 90, 120], [70, 80, 110]],
        }
    }

    /// The colour each environment leaves out of its object pool.
    fn excluded_color(self) -> Color {
        match self {
            EnvId::A => Color::Pink,
            EnvId::B => Color::Cyan,
            EnvId::C => Color::Orange,
            EnvId::D => Color::Purple,
        }
    }

    pub fn color_pool(self) -> Vec<Color> {
        Color::ALL
            .into_iter()
            .filter(|&c| c != self.excluded_color())
            .collect()
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(EnvId::A),
            "B" | "b" => Ok(EnvId::B),
            "C" | "c" => Ok(EnvId::C),
            "D" | "d" => Ok(EnvId::D),
            _ => Err(Error::Config(format!("unknown env id {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Block,
    Bowl,
    Cup,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Block => "block",
            Kind::Bowl => "bowl",
            Kind::Cup => "cup",
        }
    }

    pub fn graspable(self) -> bool {
        self != Kind::Bowl
    }

    /// Half-extent in base-view pixels.
    fn half_px(self) -> f64 {
        match self {
            Kind::Block | Kind::Cup => 3.0,
            Kind::Bowl => 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Pink,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::Pink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::Pink => "pink",
        }
    }

    pub fn rgb(self) -> Rgb {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 190, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [235, 220, 40],
            Color::Purple => [140, 50, 190],
            Color::Orange => [245, 140, 20],
            Color::Cyan => [40, 210, 220],
            Color::Pink => [245, 130, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub kind: Kind,
    pub color: Color,
    pub position: [f64; 2],
    pub held: bool,
    /// Orientation flag; only cups change it.
    pub upright: bool,
    /// 0 on the table, n when resting on an object at level n − 1.
    pub level: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperZ {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub position: [f64; 2],
    pub z: GripperZ,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub env_id: EnvId,
    pub objects: Vec<Object>,
    pub gripper: Gripper,
    pub rng_seed: u64,
    pub step_count: u64,
    /// Incremented whenever `step` had to clamp an out-of-range action.
    pub clamp_warnings: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAction {
    pub delta: [f64; 2],
    /// > 0.5 raises the gripper, < −0.5 lowers it.
    pub z_toggle: f64,
    /// > 0.5 closes, < −0.5 opens.
    pub grip: f64,
}

pub const ACTION_DIM: usize = 4;

impl ContinuousAction {
    pub const ZERO: ContinuousAction = ContinuousAction {
        delta: [0.0, 0.0],
        z_toggle: 0.0,
        grip: 0.0,
    };

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        [self.delta[0], self.delta[1], self.z_toggle, self.grip]
    }

    pub fn from_array(a: [f64; ACTION_DIM]) -> Self {
        ContinuousAction {
            delta: [a[0], a[1]],
            z_toggle: a[2],
            grip: a[3],
        }
    }

    pub fn in_range(&self) -> bool {
        self.to_array().iter().all(|v| (-1.0..=1.0).contains(v))
    }

    /// Clamps every component into [-1, 1]; NaN becomes 0. Returns whether anything changed.
    pub fn clamped(&self) -> (ContinuousAction, bool) {
        let mut changed = false;
        let a = self.to_array().map(|v| {
            let c = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
            if c != v || v.is_nan() {
                changed = true;
            }
            c
        });
        (ContinuousAction::from_array(a), changed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    PickPlace,
    Stack,
    Flip,
}

impl Verb {
    pub fn name(self) -> &'static str {
        match self {
            Verb::PickPlace => "pick_place",
            Verb::Stack => "stack",
            Verb::Flip => "flip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ReachTarget,
    TransportToDestination,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub verb: Verb,
    pub target_id: u32,
    pub destination_id: Option<u32>,
    pub phase: Phase,
}

impl Subtask {
    /// Template instruction for this subtask.
    pub fn instruction(&self, world: &WorldState) -> String {
        let describe = |id: u32| {
            let o = world.object(id).expect("subtask references a world object");
            format!("{} {}", o.color.name(), o.kind.name())
        };
        match (self.verb, self.destination_id) {
            (Verb::PickPlace, Some(d)) => {
                format!("put the {} into the {}", describe(self.target_id), describe(d))
            }
            (Verb::Stack, Some(d)) => {
                format!("stack the {} on the {}", describe(self.target_id), describe(d))
            }
            _ => format!("flip the {}", describe(self.target_id)),
        }
    }

    /// Advances the phase monotonically from the observed world.
    pub fn advance(&mut self, world: &WorldState) {
        if self.phase == Phase::Done {
            return;
        }
        if check_success(world, self) {
            self.phase = Phase::Done;
        } else if self.phase == Phase::ReachTarget
            && world.object(self.target_id).is_some_and(|o| o.held)
        {
            self.phase = Phase::TransportToDestination;
        }
    }
}

impl WorldState {
    pub fn object(&self, id: u32) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: u32) -> Option<&mut Object> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    pub fn held_object(&self) -> Option<&Object> {
        self.objects.iter().find(|o| o.held)
    }

    /// World with the same table and gripper but no objects.
    pub fn empty(env_id: EnvId) -> Self {
        WorldState {
            env_id,
            objects: Vec::new(),
            gripper: Gripper {
                position: [0.5, 0.5],
                z: GripperZ::Up,
                closed: false,
            },
            rng_seed: 0,
            step_count: 0,
            clamp_warnings: 0,
        }
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let held: Vec<_> = self.objects.iter().filter(|o| o.held).collect();
        if held.len() > 1 {
            return Err(format!("{} objects held", held.len()));
        }
        if let Some(h) = held.first() {
            if h.position != self.gripper.position {
                return Err("held object does not track the gripper".into());
            }
        }
        let inside = |p: [f64; 2]| p.iter().all(|v| (0.0..=1.0).contains(v));
        if !inside(self.gripper.position) {
            return Err("gripper outside table".into());
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !inside(o.position) {
                return Err(format!("object {} outside table", o.id));
            }
            if self.objects[..i].iter().any(|p| p.id == o.id) {
                return Err(format!("duplicate object id {}", o.id));
            }
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a world with 4–7 objects. Layout (count, kinds, positions, gripper
/// start) depends on `seed` only; `env_id` picks the palette and colour pool.
pub fn create_world(seed: u64, env_id: EnvId) -> Result<WorldState> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 1));
    let n = rng.gen_range(4..=7usize);
    // Two bowls keep every chain feasible: the top of any tower can move to a bowl it is not in.
    let mut kinds = vec![Kind::Bowl, Kind::Bowl, Kind::Block, Kind::Cup];
    for _ in 4..n {
        kinds.push(match rng.gen_range(0..3) {
            0 => Kind::Block,
            1 => Kind::Bowl,
            _ => Kind::Cup,
        });
    }
    kinds.shuffle(&mut rng);

    let pool = env_id.color_pool();
    let mut color_idx: Vec<usize> = (0..pool.len()).collect();
    color_idx.shuffle(&mut rng);

    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut attempts = 0;
    while positions.len() < n {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailed { attempts: MAX_PLACEMENT_ATTEMPTS });
        }
        let p = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
        if positions.iter().all(|&q| dist(p, q) >= MIN_SPACING) {
            positions.push(p);
        }
    }
    let gripper = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];

    let objects = kinds
        .into_iter()
        .zip(positions)
        .enumerate()
        .map(|(i, (kind, position))| Object {
            id: i as u32,
            kind,
            color: pool[color_idx[i]],
            position,
            held: false,
            upright: true,
            level: 0,
        })
        .collect();

    Ok(WorldState {
        env_id,
        objects,
        gripper: Gripper {
            position: gripper,
            z: GripperZ::Up,
            closed: false,
        },
        rng_seed: seed,
        step_count: 0,
        clamp_warnings: 0,
    })
}

/// Applies one action: height command, then translation, then grip.
pub fn step(world: &WorldState, action: &ContinuousAction) -> WorldState {
    let mut w = world.clone();
    w.step_count += 1;
    let (a, changed) = action.clamped();
    if changed {
        w.clamp_warnings += 1;
    }

    if a.z_toggle > COMMAND_THRESHOLD {
        w.gripper.z = GripperZ::Up;
    } else if a.z_toggle < -COMMAND_THRESHOLD {
        w.gripper.z = GripperZ::Down;
    }

    for (p, d) in w.gripper.position.iter_mut().zip(a.delta) {
        *p = (*p + d * MAX_STEP).clamp(0.0, 1.0);
    }
    let gp = w.gripper.position;
    if let Some(h) = w.objects.iter_mut().find(|o| o.held) {
        h.position = gp;
    }

    if a.grip > COMMAND_THRESHOLD && !w.gripper.closed {
        w.gripper.closed = true;
        if w.gripper.z == GripperZ::Down {
            let pick = w
                .objects
                .iter()
                .filter(|o| o.kind.graspable() && dist(o.position, gp) <= REACH_RADIUS)
                .max_by(|a, b| {
                    a.level
                        .cmp(&b.level)
                        .then(dist(b.position, gp).total_cmp(&dist(a.position, gp)))
                        .then(b.id.cmp(&a.id))
                })
                .map(|o| o.id);
            if let Some(id) = pick {
                let o = w.object_mut(id).unwrap();
                o.held = true;
                o.position = gp;
                o.level = 0;
            }
        }
    } else if a.grip < -COMMAND_THRESHOLD && w.gripper.closed {
        w.gripper.closed = false;
        if let Some(id) = w.held_object().map(|o| o.id) {
            let below = w
                .objects
                .iter()
                .filter(|o| o.id != id && dist(o.position, gp) <= REACH_RADIUS)
                .map(|o| o.level + 1)
                .max()
                .unwrap_or(0);
            let dropped = w.gripper.z == GripperZ::Up;
            let o = w.object_mut(id).unwrap();
            o.held = false;
            o.position = gp;
            o.level = below;
            if dropped && o.kind == Kind::Cup {
                o.upright = !o.upright;
            }
        }
    }
    w
}

/// Pure success predicate for a subtask.
pub fn check_success(world: &WorldState, subtask: &Subtask) -> bool {
    let Some(target) = world.object(subtask.target_id) else {
        return false;
    };
    if target.held {
        return false;
    }
    match subtask.verb {
        Verb::Flip => !target.upright,
        Verb::PickPlace | Verb::Stack => subtask
            .destination_id
            .and_then(|d| world.object(d))
            .is_some_and(|d| dist(target.position, d.position) <= REACH_RADIUS),
    }
}

#[derive(Debug, Clone)]
struct Symbolic {
    id: u32,
    kind: Kind,
    /// Object directly underneath, if any.
    on: Option<u32>,
    upright: bool,
}

struct SymbolicTable(Vec<Symbolic>);

impl SymbolicTable {
    fn get(&self, id: u32) -> &Symbolic {
        self.0.iter().find(|s| s.id == id).expect("known id")
    }

    fn covered(&self, id: u32) -> bool {
        self.0.iter().any(|s| s.on == Some(id))
    }

    /// Bottom of the tower the object belongs to.
    fn anchor(&self, mut id: u32) -> u32 {
        while let Some(below) = self.get(id).on {
            id = below;
        }
        id
    }

    /// Uncovered top of the tower rooted at `anchor`.
    fn top(&self, anchor: u32) -> u32 {
        let mut id = anchor;
        while let Some(above) = self.0.iter().find(|s| s.on == Some(id)) {
            id = above.id;
        }
        id
    }
}

/// Samples `length` subtasks that are feasible in order, tracking a symbolic
/// model of which object rests on which.
pub fn sample_task_chain(seed: u64, world: &WorldState, length: usize) -> Result<Vec<Subtask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 2));
    let mut table = SymbolicTable(
        world
            .objects
            .iter()
            .map(|o| Symbolic {
                id: o.id,
                kind: o.kind,
                on: world
                    .objects
                    .iter()
                    .filter(|p| {
                        o.level > 0
                            && p.id != o.id
                            && p.level + 1 == o.level
                            && dist(p.position, o.position) <= REACH_RADIUS
                    })
                    .map(|p| p.id)
                    .next(),
                upright: o.upright,
            })
            .collect(),
    );

    let mut chain = Vec::with_capacity(length);
    for _ in 0..length {
        let mut options: [Vec<(u32, Option<u32>)>; 3] = Default::default();
        for t in &table.0 {
            if table.covered(t.id) || !t.kind.graspable() {
                continue;
            }
            for d in &table.0 {
                if d.id == t.id {
                    continue;
                }
                if d.kind == Kind::Bowl && table.anchor(t.id) != d.id {
                    options[0].push((t.id, Some(d.id)));
                }
                if t.kind == Kind::Block && d.kind == Kind::Block && !table.covered(d.id) {
                    options[1].push((t.id, Some(d.id)));
                }
            }
            if t.kind == Kind::Cup && t.upright {
                options[2].push((t.id, None));
            }
        }
        let verbs: Vec<usize> = (0..3).filter(|&v| !options[v].is_empty()).collect();
        if verbs.is_empty() {
            return Err(Error::InfeasibleChain(format!(
                "no feasible subtask after {} of {length}",
                chain.len()
            )));
        }
        let v = verbs[rng.gen_range(0..verbs.len())];
        let (target_id, destination_id) = options[v][rng.gen_range(0..options[v].len())];
        let verb = [Verb::PickPlace, Verb::Stack, Verb::Flip][v];
        match verb {
            Verb::Flip => {
                let t = table.0.iter_mut().find(|s| s.id == target_id).unwrap();
                t.upright = false;
            }
            _ => {
                let d = destination_id.unwrap();
                let idx = table.0.iter().position(|s| s.id == target_id).unwrap();
                table.0[idx].on = None;
                let top = table.top(d);
                table.0[idx].on = Some(top);
            }
        }
        chain.push(Subtask {
            verb,
            target_id,
            destination_id,
            phase: Phase::ReachTarget,
        });
    }
    Ok(chain)
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    [
        ((to[0] - from[0]) / MAX_STEP).clamp(-1.0, 1.0),
        ((to[1] - from[1]) / MAX_STEP).clamp(-1.0, 1.0),
    ]
}

const AT_GOAL: f64 = 1e-6;

/// Scripted proportional controller. The branch is chosen from the observed
/// world (whether the target is held), so the controller also recovers from
/// drops.
pub fn expert_action(world: &WorldState, subtask: &Subtask) -> ContinuousAction {
    let g = &world.gripper;
    let Some(target) = world.object(subtask.target_id) else {
        return ContinuousAction::ZERO;
    };
    let down = g.z == GripperZ::Down;
    let mut act = ContinuousAction::ZERO;

    if !target.held {
        if g.closed {
            act.grip = -1.0;
        }
        if dist(g.position, target.position) > AT_GOAL {
            act.delta = toward(g.position, target.position);
            if down {
                act.z_toggle = 1.0;
            }
        } else if !down {
            act.z_toggle = -1.0;
        } else if !g.closed {
            act.grip = 1.0;
        }
        return act;
    }

    match (subtask.verb, subtask.destination_id.and_then(|d| world.object(d))) {
        (Verb::Flip, _) | (_, None) => {
            if down {
                act.z_toggle = 1.0;
            } else {
                act.grip = -1.0;
            }
        }
        (_, Some(dest)) => {
            if dist(g.position, dest.position) > AT_GOAL {
                act.delta = toward(g.position, dest.position);
                if down {
                    act.z_toggle = 1.0;
                }
            } else if !down {
                act.z_toggle = -1.0;
            } else {
                act.grip = -1.0;
            }
        }
    }
    act
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Base,
    Wrist,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Base => "base",
            View::Wrist => "wrist",
        }
    }
}

struct Projection {
    scale: f64,
    origin: [f64; 2],
    offset: f64,
}

impl Projection {
    fn for_view(world: &WorldState, view: View) -> Self {
        match view {
            View::Base => Projection {
                scale: RASTER as f64,
                origin: [0.0, 0.0],
                offset: 0.0,
            },
            View::Wrist => Projection {
                scale: 2.0 * RASTER as f64,
                origin: world.gripper.position,
                offset: RASTER as f64 / 2.0,
            },
        }
    }

    fn px(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) * self.scale + self.offset,
            (p[1] - self.origin[1]) * self.scale + self.offset,
        ]
    }

    fn zoom(&self) -> f64 {
        self.scale / RASTER as f64
    }
}

/// Pixel range `[lo, hi)` whose centres fall in `[c − s, c + s)`, clipped to the raster.
fn span(c: f64, s: f64) -> (i64, i64) {
    let lo = (c - s - 0.5).ceil() as i64;
    let hi = (c + s - 0.5).ceil() as i64;
    (lo.max(0), hi.min(RASTER as i64))
}

fn fill_square(img: &mut Image, c: [f64; 2], s: f64, color: Rgb) {
    let (x0, x1) = span(c[0], s);
    let (y0, y1) = span(c[1], s);
    for y in y0..y1 {
        for x in x0..x1 {
            img.put(x as usize, y as usize, color);
        }
    }
}

fn darken(c: Rgb) -> Rgb {
    c.map(|v| v / 2)
}

fn draw_object(img: &mut Image, o: &Object, proj: &Projection) {
    let c = proj.px(o.position);
    let s = o.kind.half_px() * proj.zoom();
    let rgb = o.color.rgb();
    match o.kind {
        Kind::Block => fill_square(img, c, s, rgb),
        Kind::Bowl => {
            fill_square(img, c, s, rgb);
            fill_square(img, c, s - 2.0 * proj.zoom(), darken(rgb));
        }
        Kind::Cup => {
            fill_square(img, c, s, rgb);
            let mark = if o.upright { [20, 20, 20] } else { [240, 240, 240] };
            fill_square(img, c, proj.zoom(), mark);
        }
    }
}

/// Draw order: resting objects by stack level, then the held object, then the gripper.
pub fn render(world: &WorldState, view: View) -> Image {
    let proj = Projection::for_view(world, view);
    let mut img = Image::new(RASTER, RASTER, [0, 0, 0]);
    let pal = world.env_id.palette();
    let table0 = proj.px([0.0, 0.0]);
    let table1 = proj.px([1.0, 1.0]);
    for y in 0..RASTER {
        for x in 0..RASTER {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            if fx < table0[0] || fy < table0[1] || fx >= table1[0] || fy >= table1[1] {
                continue;
            }
            // checker cells of 1/8 table width
            let wx = ((fx - proj.offset) / proj.scale + proj.origin[0]) * 8.0;
            let wy = ((fy - proj.offset) / proj.scale + proj.origin[1]) * 8.0;
            let cell = (wx.floor() as i64 + wy.floor() as i64).rem_euclid(2) as usize;
            img.put(x, y, pal[cell]);
        }
    }

    let mut order: Vec<&Object> = world.objects.iter().collect();
    order.sort_by_key(|o| (o.held, o.level, o.id));
    for o in order {
        draw_object(&mut img, o, &proj);
    }

    let gc = proj.px(world.gripper.position);
    let color = if world.gripper.closed { [40, 40, 40] } else { [255, 255, 255] };
    let arm = 2.0 * proj.zoom();
    let thick = 0.5 * proj.zoom();
    match world.gripper.z {
        GripperZ::Up => {
            fill_rect(&mut img, gc, arm, thick, color);
            fill_rect(&mut img, gc, thick, arm, color);
        }
        GripperZ::Down => {
            fill_rect(&mut img, gc, arm, thick, color);
            fill_rect(&mut img, gc, thick, arm, color);
            fill_square(&mut img, gc, thick * 2.0, [0, 0, 0]);
        }
    }
    img
}

fn fill_rect(img: &mut Image, c: [f64; 2], sx: f64, sy: f64, color: Rgb) {
    let (x0, x1) = span(c[0], sx);
    let (y0, y1) = span(c[1], sy);
    for y in y0..y1 {
        for x in x0..x1 {
            img.put(x as usize, y as usize, color);
        }
    }
}

/// Pixel extent of an object dilated by [`GAZE_DILATION_PX`] (scaled by the view zoom).
pub fn object_bbox(world: &WorldState, id: u32, view: View) -> Result<BBox> {
    let o = world
        .object(id)
        .ok_or_else(|| Error::Precondition(format!("object {id} not in world")))?;
    let proj = Projection::for_view(world, view);
    let c = proj.px(o.position);
    let s = o.kind.half_px() * proj.zoom();
    let (x0, x1) = span(c[0], s);
    let (y0, y1) = span(c[1], s);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::ObjectOccluded { id, view: view.name() });
    }
    let d = (GAZE_DILATION_PX * proj.zoom()) as i64;
    let r = RASTER as i64;
    Ok(BBox {
        x_min: (x0 - d).clamp(0, r) as u32,
        y_min: (y0 - d).clamp(0, r) as u32,
        x_max: (x1 + d).clamp(0, r) as u32,
        y_max: (y1 + d).clamp(0, r) as u32,
    })
}

/// Id of the object the agent should be looking at for this subtask.
pub fn gaze_object(subtask: &Subtask) -> Result<u32> {
    match subtask.phase {
        Phase::Done => Err(Error::Precondition("gaze requested for a finished subtask".into())),
        Phase::ReachTarget => Ok(subtask.target_id),
        Phase::TransportToDestination => Ok(subtask.destination_id.unwrap_or(subtask.target_id)),
    }
}

pub fn gaze_bbox(world: &WorldState, subtask: &Subtask, view: View) -> Result<BBox> {
    object_bbox(world, gaze_object(subtask)?, view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run_subtask(world: &mut WorldState, sub: &mut Subtask, budget: usize) -> bool {
        for _ in 0..budget {
            sub.advance(world);
            if sub.phase == Phase::Done {
                return true;
            }
            let a = expert_action(world, sub);
            *world = step(world, &a);
        }
        sub.advance(world);
        sub.phase == Phase::Done
    }

    #[test]
    fn create_world_deterministic_and_spaced() {
        for seed in 0..50 {
            let a = create_world(seed, EnvId::A).unwrap();
            assert_eq!(a, create_world(seed, EnvId::A).unwrap());
            assert!((4..=7).contains(&a.objects.len()));
            for (i, o) in a.objects.iter().enumerate() {
                for p in &a.objects[..i] {
                    assert!(dist(o.position, p.position) >= 0.08);
                }
            }
        }
    }

    #[test]
    fn env_changes_palette_not_layout() {
        let a = create_world(0, EnvId::A).unwrap();
        let d = create_world(0, EnvId::D).unwrap();
        for (x, y) in a.objects.iter().zip(&d.objects) {
            assert_eq!((x.kind, x.position), (y.kind, y.position));
        }
        assert_eq!(a.gripper, d.gripper);
        let ra = render(&WorldState::empty(EnvId::A), View::Base);
        let rd = render(&WorldState::empty(EnvId::D), View::Base);
        assert_ne!(ra, rd);
        let pa = EnvId::A.palette();
        let pd = EnvId::D.palette();
        assert!(ra.pixels().all(|p| pa.contains(&p) || p == [255, 255, 255]));
        assert!(rd.pixels().any(|p| pd.contains(&p)));
    }

    #[test]
    fn empty_table_renders_only_background() {
        let mut w = WorldState::empty(EnvId::B);
        w.gripper.position = [2.0, 2.0]; // off-table so nothing is drawn
        let img = render(&w, View::Base);
        let pal = EnvId::B.palette();
        assert!(img.pixels().all(|p| pal.contains(&p)));
    }

    #[test]
    fn red_block_centred_on_raster() {
        let mut w = WorldState::empty(EnvId::A);
        w.gripper.position = [0.05, 0.05];
        w.objects.push(Object {
            id: 0,
            kind: Kind::Block,
            color: Color::Red,
            position: [0.5, 0.5],
            held: false,
            upright: true,
            level: 0,
        });
        let img = render(&w, View::Base);
        let red: Vec<(usize, usize)> = (0..64)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .filter(|&(x, y)| img.get(x, y) == Color::Red.rgb())
            .collect();
        assert_eq!(red.len(), 36);
        let cx = red.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / 36.0;
        let cy = red.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / 36.0;
        assert_eq!((cx, cy), (32.0, 32.0));
        assert_eq!(img, render(&w, View::Base));
    }

    #[test]
    fn zero_action_is_identity() {
        let w = create_world(3, EnvId::C).unwrap();
        let n = step(&w, &ContinuousAction::ZERO);
        let mut expect = w.clone();
        expect.step_count += 1;
        assert_eq!(n, expect);
    }

    fn single_block(d: f64) -> WorldState {
        let mut w = WorldState::empty(EnvId::A);
        w.objects.push(Object {
            id: 0,
            kind: Kind::Block,
            color: Color::Red,
            position: [0.5, 0.5],
            held: false,
            upright: true,
            level: 0,
        });
        w.gripper.position = [0.5 + d, 0.5];
        w.gripper.z = GripperZ::Down;
        w
    }

    #[test]
    fn grasp_threshold() {
        let close = ContinuousAction { grip: 1.0, ..ContinuousAction::ZERO };
        assert!(step(&single_block(0.04), &close).objects[0].held);
        assert!(!step(&single_block(0.06), &close).objects[0].held);
    }

    #[test]
    fn out_of_range_actions_are_clamped_and_counted() {
        let w = single_block(0.3);
        let n = step(&w, &ContinuousAction { delta: [5.0, f64::NAN], z_toggle: 0.0, grip: 0.0 });
        assert_eq!(n.clamp_warnings, 1);
        assert!((n.gripper.position[0] - 0.88).abs() < 1e-12);
        assert_eq!(n.gripper.position[1], 0.5);
    }

    #[test]
    fn chain_sampling() {
        let mut w = WorldState::empty(EnvId::A);
        for (i, k) in [Kind::Block, Kind::Bowl].into_iter().enumerate() {
            w.objects.push(Object {
                id: i as u32,
                kind: k,
                color: Color::ALL[i],
                position: [0.2 + 0.5 * i as f64, 0.5],
                held: false,
                upright: true,
                level: 0,
            });
        }
        let c = sample_task_chain(1, &w, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert!(matches!(c[0].verb, Verb::PickPlace | Verb::Stack));

        let mut bowls = WorldState::empty(EnvId::A);
        bowls.objects = w.objects.iter().cloned().filter(|o| o.kind == Kind::Bowl).collect();
        assert!(matches!(sample_task_chain(0, &bowls, 1), Err(Error::InfeasibleChain(_))));

        let w = create_world(11, EnvId::B).unwrap();
        let a = sample_task_chain(5, &w, 5).unwrap();
        assert_eq!(a, sample_task_chain(5, &w, 5).unwrap());
        for s in &a {
            assert!(w.object(s.target_id).is_some());
            assert!(s.destination_id.is_none_or(|d| w.object(d).is_some()));
            assert!(!check_success(&w, s));
        }
    }

    #[test]
    fn expert_at_goal_closes() {
        let mut w = single_block(0.0);
        w.gripper.closed = false;
        let sub = Subtask {
            verb: Verb::Flip,
            target_id: 0,
            destination_id: None,
            phase: Phase::ReachTarget,
        };
        let a = expert_action(&w, &sub);
        assert_eq!(a.grip, 1.0);
        assert_eq!(a.delta, [0.0, 0.0]);
    }

    #[test]
    fn expert_completes_chains_with_consistent_gaze() {
        for seed in 0..40 {
            for env in EnvId::ALL {
                let mut w = create_world(seed, env).unwrap();
                let chain = sample_task_chain(seed, &w, 5).unwrap();
                for mut sub in chain {
                    for _ in 0..60 {
                        sub.advance(&w);
                        if sub.phase == Phase::Done {
                            break;
                        }
                        gaze_bbox(&w, &sub, View::Base).unwrap();
                        let a = expert_action(&w, &sub);
                        assert!(a.in_range());
                        w = step(&w, &a);
                        w.validate().unwrap();
                    }
                    sub.advance(&w);
                    assert_eq!(sub.phase, Phase::Done, "seed {seed} env {env:?}");
                }
            }
        }
    }

    #[test]
    fn gaze_switches_at_grasp() {
        let mut w = create_world(4, EnvId::A).unwrap();
        let chain = sample_task_chain(4, &w, 5).unwrap();
        let mut sub = chain
            .into_iter()
            .find(|s| s.destination_id.is_some())
            .expect("chain with a destination");
        // make it the first subtask by resetting the world
        w = create_world(4, EnvId::A).unwrap();
        let target_box = gaze_bbox(&w, &sub, View::Base).unwrap();
        assert_eq!(target_box, object_bbox(&w, sub.target_id, View::Base).unwrap());
        while sub.phase == Phase::ReachTarget {
            w = step(&w, &expert_action(&w, &sub));
            sub.advance(&w);
        }
        let dest = sub.destination_id.unwrap();
        assert!(w.object(sub.target_id).unwrap().held);
        assert_eq!(
            gaze_bbox(&w, &sub, View::Base).unwrap(),
            object_bbox(&w, dest, View::Base).unwrap()
        );
        assert!(run_subtask(&mut w, &mut sub, 60));
    }

    #[test]
    fn gaze_box_encloses_target_pixels() {
        let w = create_world(9, EnvId::A).unwrap();
        for o in &w.objects {
            let b = object_bbox(&w, o.id, View::Base).unwrap();
            assert!(b.is_valid(64, 64));
            let mut only = w.clone();
            only.objects.retain(|p| p.id == o.id);
            only.gripper.position = [3.0, 3.0];
            let img = render(&only, View::Base);
            let pal = w.env_id.palette();
            for y in 0..64 {
                for x in 0..64 {
                    if !pal.contains(&img.get(x, y)) {
                        assert!(b.intersects(x as u32, y as u32, x as u32 + 1, y as u32 + 1));
                    }
                }
            }
        }
    }

    #[test]
    fn wrist_view_occlusion() {
        let mut w = single_block(0.0);
        w.gripper.position = [0.95, 0.95];
        assert!(matches!(
            object_bbox(&w, 0, View::Wrist),
            Err(Error::ObjectOccluded { .. })
        ));
        w.gripper.position = [0.5, 0.5];
        let b = object_bbox(&w, 0, View::Wrist).unwrap();
        assert_eq!(b, BBox { x_min: 18, y_min: 18, x_max: 46, y_max: 46 });
    }

    #[test]
    fn success_is_pure_and_false_initially() {
        let w = create_world(2, EnvId::A).unwrap();
        let chain = sample_task_chain(2, &w, 5).unwrap();
        for s in &chain {
            let before = check_success(&w, s);
            let _ = render(&w, View::Base);
            let _ = render(&w, View::Wrist);
            assert_eq!(before, check_success(&w, s));
            assert!(!before);
        }
    }

    proptest! {
        #[test]
        fn random_actions_preserve_invariants(seed in 0u64..500, acts in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5), 1..80)) {
            let mut w = create_world(seed, EnvId::ALL[(seed % 4) as usize]).unwrap();
            for (a, b, c, d) in acts {
                w = step(&w, &ContinuousAction { delta: [a, b], z_toggle: c, grip: d });
                prop_assert!(w.validate().is_ok(), "{:?}", w.validate());
            }
        }
    }
}
