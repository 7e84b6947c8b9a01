//! Intersection controller: the scheduling table of committed per-zone
//! reservations and the three-step validation of incoming proposals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{LaneId, Path, PathId, Road, ZoneId};
use crate::planner::{profile_zone_times, MobilityProfile, PlanError, ZoneTime, ZoneWindow};

pub type CavId = u64;

/// Shifts at or below this are treated as no delay.
/// Overlaps and shifts below this many seconds are treated as zero.
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("vehicle {0} already has a row in the scheduling table")]
    DuplicateCav(CavId),
    #[error("vehicle {0} is not in the scheduling table")]
    UnknownCav(CavId),
    #[error("vehicle {cav} has no reservation on {zone}")]
    UnknownZone { cav: CavId, zone: ZoneId },
    #[error("commit of vehicle {cav} conflicts on {zone} with vehicle {other}")]
    StaleValidation { cav: CavId, zone: ZoneId, other: CavId },
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Bumper-to-bumper gap required behind the same-lane leader.
    pub safety_gap: f64,
    /// Gap required behind the vehicle ahead on the exit lane.
    pub safe_margin: f64,
    /// Widening applied to accepted reservations on each side.
    pub epsilon: f64,
    /// Sampling step of the gap check.
    pub sample_dt: f64,
    /// Braking magnitude assumed for the exit-lane compatibility check.
    pub brake: f64,
    /// Messages per negotiation before it is abandoned.
    pub max_exchanges: u32,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            safety_gap: 6.0,
            safe_margin: 6.0,
            epsilon: 0.1,
            sample_dt: 0.01,
            brake: 4.5,
            max_exchanges: 10,
        }
    }
}

/// What the controller knows about a vehicle's request.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<'a> {
    pub cav_id: CavId,
    pub path: &'a Path,
    pub length: f64,
    pub profile: Option<&'a MobilityProfile>,
    pub zone_times: Vec<ZoneTime>,
}

impl<'a> Proposal<'a> {
    pub fn new(cav_id: CavId, path: &'a Path, length: f64, profile: &'a MobilityProfile) -> Result<Self, PlanError> {
        Ok(Proposal {
            cav_id,
            path,
            length,
            profile: Some(profile),
            zone_times: profile_zone_times(profile, path, length)?,
        })
    }

    /// A proposal known only through its zone times; the gap checks are skipped.
    pub fn from_zone_times(cav_id: CavId, path: &'a Path, length: f64, zone_times: Vec<ZoneTime>) -> Self {
        Proposal {
            cav_id,
            path,
            length,
            profile: None,
            zone_times,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub cav_id: CavId,
    pub trajectory: Option<MobilityProfile>,
    pub path: PathId,
    pub entry_lane: LaneId,
    pub exit_lane: LaneId,
    pub entry_road: Road,
    pub exit_road: Road,
    pub exit_start: f64,
    pub length: f64,
    pub reservations: Vec<ZoneTime>,
}

impl TableRow {
    pub fn last_exit(&self) -> f64 {
        self.reservations
            .iter()
            .map(|r| r.t_exit)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationOutcome {
    /// Windows are the widened reservations to record.
    Accept { windows: Vec<ZoneWindow> },
    /// Tentative windows; `delay` is the rigid shift that produced them.
    Revise { windows: Vec<ZoneWindow>, delay: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Interval {
    start: f64,
    end: f64,
    cav: CavId,
}

fn overlaps(a: f64, b: f64, c: f64, d: f64) -> bool {
    c < b - TIME_TOL && a < d - TIME_TOL
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulingTable {
    rows: Vec<TableRow>,
    index: BTreeMap<ZoneId, Vec<Interval>>,
}

impl SchedulingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[TableRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, cav: CavId) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.cav_id == cav)
    }

    /// Committed intervals on `zone`, ordered by start.
    pub fn zone_intervals(&self, zone: ZoneId) -> Vec<(f64, f64, CavId)> {
        self.index
            .get(&zone)
            .map(|v| v.iter().map(|i| (i.start, i.end, i.cav)).collect())
            .unwrap_or_default()
    }

    fn intervals(&self, zone: ZoneId) -> &[Interval] {
        self.index.get(&zone).map_or(&[], |v| v.as_slice())
    }

    /// Inserts a row directly, bypassing validation but not the
    /// disjointness check.
    pub fn insert_row(&mut self, row: TableRow) -> Result<(), ControllerError> {
        if self.row(row.cav_id).is_some() {
            return Err(ControllerError::DuplicateCav(row.cav_id));
        }
        for r in &row.reservations {
            if let Some(other) = self
                .intervals(r.zone)
                .iter()
                .find(|i| overlaps(r.t_enter, r.t_exit, i.start, i.end))
            {
                return Err(ControllerError::StaleValidation {
                    cav: row.cav_id,
                    zone: r.zone,
                    other: other.cav,
                });
            }
        }
        for r in &row.reservations {
            let list = self.index.entry(r.zone).or_default();
            let pos = list.partition_point(|i| i.start < r.t_enter);
            list.insert(
                pos,
                Interval {
                    start: r.t_enter,
                    end: r.t_exit,
                    cav: row.cav_id,
                },
            );
        }
        self.rows.push(row);
        Ok(())
    }

    /// Records an accepted proposal with its widened windows.
    pub fn commit(&mut self, proposal: &Proposal<'_>, windows: &[ZoneWindow]) -> Result<(), ControllerError> {
        let path = proposal.path;
        let reservations = windows
            .iter()
            .map(|w| ZoneTime {
                zone: w.zone,
                t_enter: w.t_enter_min,
                t_exit: w.t_exit_max,
            })
            .collect();
        self.insert_row(TableRow {
            cav_id: proposal.cav_id,
            trajectory: proposal.profile.cloned(),
            path: path.id,
            entry_lane: path.entry_lane,
            exit_lane: path.exit_lane,
            entry_road: path.entry_road,
            exit_road: path.exit_road,
            exit_start: path.exit_start,
            length: proposal.length,
            reservations,
        })
    }

    fn unindex(&mut self, cav: CavId, zone: Option<ZoneId>) {
        for (z, list) in self.index.iter_mut() {
            if zone.is_none_or(|target| target == *z) {
                list.retain(|i| i.cav != cav);
            }
        }
    }

    pub fn remove(&mut self, cav: CavId) -> Result<TableRow, ControllerError> {
        let pos = self
            .rows
            .iter()
            .position(|r| r.cav_id == cav)
            .ok_or(ControllerError::UnknownCav(cav))?;
        self.unindex(cav, None);
        Ok(self.rows.remove(pos))
    }

    /// Frees `zone` once the vehicle has physically left it at `t_exit`.
    /// The row disappears with its last reservation.
    pub fn release(&mut self, cav: CavId, zone: ZoneId, t_exit: f64) -> Result<(), ControllerError> {
        let row = self
            .rows
            .iter_mut()
            .find(|r| r.cav_id == cav)
            .ok_or(ControllerError::UnknownCav(cav))?;
        let res = row
            .reservations
            .iter_mut()
            .find(|r| r.zone == zone)
            .ok_or(ControllerError::UnknownZone { cav, zone })?;
        res.t_exit = res.t_exit.min(t_exit).max(res.t_enter);
        let end = res.t_exit;
        if let Some(i) = self
            .index
            .get_mut(&zone)
            .and_then(|l| l.iter_mut().find(|i| i.cav == cav))
        {
            i.end = end;
        }
        Ok(())
    }

    /// Removes rows whose last reservation ended more than `grace` before `now`.
    pub fn expire_rows(&mut self, now: f64, grace: f64) -> Vec<CavId> {
        let gone: Vec<CavId> = self
            .rows
            .iter()
            .filter(|r| now > r.last_exit() + grace)
            .map(|r| r.cav_id)
            .collect();
        for &cav in &gone {
            let _ = self.remove(cav);
        }
        gone
    }

    pub fn clear(&mut self) {
        self.rows.clear();
        self.index.clear();
    }

    /// True when every zone's committed intervals are pairwise disjoint.
    pub fn is_disjoint(&self) -> bool {
        self.index.values().all(|list| {
            list.windows(2)
                .all(|w| !overlaps(w[0].start, w[0].end, w[1].start, w[1].end))
        })
    }

    /// CSV dump with one column pair per zone.
    pub fn to_csv(&self, zone_count: usize) -> String {
        let mut out = String::from("cav_id,trajectory,entry_road,exit_road");
        for z in 1..=zone_count {
            let _ = write!(out, ",enter_{z},exit_{z}");
        }
        out.push('\n');
        for row in &self.rows {
            let traj = row.trajectory.as_ref().map_or_else(String::new, |p| {
                format!("{} waypoints {:.3}-{:.3}", p.waypoints.len(), p.t_start, p.t_end)
            });
            let _ = write!(out, "{},{},{},{}", row.cav_id, traj, row.entry_road, row.exit_road);
            for z in 1..=zone_count {
                match row.reservations.iter().find(|r| r.zone.0 as usize == z) {
                    Some(r) => {
                        let _ = write!(out, ",{:.3},{:.3}", r.t_enter, r.t_exit);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Runs the before-, within- and after-intersection checks.
    pub fn validate(&self, cfg: &ControllerConfig, proposal: &Proposal<'_>) -> ValidationOutcome {
        let mut delay = self.leader_delay(cfg, proposal);
        for _ in 0..32 {
            delay = self.earliest_free_shift(&proposal.zone_times, delay);
            match self.exit_conflict(cfg, proposal, delay) {
                None => break,
                Some(ahead) => {
                    let next = self.exit_delay(cfg, proposal, ahead, delay);
                    if next <= delay {
                        break;
                    }
                    delay = next;
                }
            }
        }

        if delay <= TIME_TOL {
            let windows = proposal
                .zone_times
                .iter()
                .map(|zt| {
                    let list = self.intervals(zt.zone);
                    let prev_end = list
                        .iter()
                        .filter(|i| i.end <= zt.t_enter + TIME_TOL)
                        .map(|i| i.end)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let next_start = list
                        .iter()
                        .filter(|i| i.start >= zt.t_exit - TIME_TOL)
                        .map(|i| i.start)
                        .fold(f64::INFINITY, f64::min);
                    ZoneWindow {
                        zone: zt.zone,
                        t_enter_min: (zt.t_enter - cfg.epsilon).max(prev_end),
                        t_exit_max: (zt.t_exit + cfg.epsilon).min(next_start),
                    }
                })
                .collect();
            return ValidationOutcome::Accept { windows };
        }

        let windows = proposal
            .zone_times
            .iter()
            .map(|zt| {
                let start = zt.t_enter + delay;
                let next_start = self
                    .intervals(zt.zone)
                    .iter()
                    .filter(|i| i.start >= start)
                    .map(|i| i.start)
                    .fold(f64::INFINITY, f64::min);
                ZoneWindow {
                    zone: zt.zone,
                    t_enter_min: start,
                    t_exit_max: next_start,
                }
            })
            .collect();
        ValidationOutcome::Revise { windows, delay }
    }

    /// Step 1: shift keeping `safety_gap` behind the last committed vehicle
    /// from the same entry lane, up to the proposer's intersection entry.
    fn leader_delay(&self, cfg: &ControllerConfig, proposal: &Proposal<'_>) -> f64 {
        let Some(ego) = proposal.profile else { return 0.0 };
        let Some(leader) = self
            .rows
            .iter()
            .rev()
            .find(|r| r.entry_lane == proposal.path.entry_lane && r.cav_id != proposal.cav_id)
        else {
            return 0.0;
        };
        let Some(lp) = &leader.trajectory else { return 0.0 };
        let mut delay: f64 = 0.0;
        let n = ((ego.t_int - ego.t_start) / cfg.sample_dt).ceil().max(0.0) as usize;
        for k in 0..=n {
            let t = (ego.t_start + k as f64 * cfg.sample_dt).min(ego.t_int);
            let needed = ego.position_at(t) + cfg.safety_gap + leader.length;
            if let Some(t_leader) = lp.time_at(needed) {
                delay = delay.max(t_leader - t);
            }
        }
        delay
    }

    /// Step 2: smallest shift `>= min_shift` leaving every zone conflict-free.
    /// Candidates are `min_shift` and the shifts aligning an entry with the
    /// end of a committed interval.
    fn earliest_free_shift(&self, times: &[ZoneTime], min_shift: f64) -> f64 {
        let free = |d: f64| {
            times.iter().all(|zt| {
                self.intervals(zt.zone)
                    .iter()
                    .all(|i| !overlaps(zt.t_enter + d, zt.t_exit + d, i.start, i.end))
            })
        };
        let mut candidates = vec![min_shift];
        for zt in times {
            for i in self.intervals(zt.zone) {
                let d = i.end - zt.t_enter;
                if d > min_shift {
                    candidates.push(d);
                }
            }
        }
        candidates.sort_by(f64::total_cmp);
        candidates.into_iter().find(|&d| free(d)).unwrap_or(min_shift)
    }

    /// Step 3 target: the vehicle ahead on the same exit lane, if the
    /// proposal shifted by `delay` is not compatible with it.
    fn exit_conflict<'t>(
        &'t self,
        cfg: &ControllerConfig,
        proposal: &Proposal<'_>,
        delay: f64,
    ) -> Option<&'t TableRow> {
        let ego = proposal.profile?;
        let ego_exit = proposal
            .zone_times
            .iter()
            .map(|z| z.t_exit)
            .fold(f64::NEG_INFINITY, f64::max)
            + delay;
        let ahead = self
            .rows
            .iter()
            .filter(|r| r.exit_lane == proposal.path.exit_lane && r.cav_id != proposal.cav_id)
            .filter(|r| r.trajectory.is_some() && r.last_exit() <= ego_exit)
            .max_by(|a, b| a.last_exit().total_cmp(&b.last_exit()))?;
        (!exit_compatible(cfg, ego, proposal, ahead, delay)).then_some(ahead)
    }

    /// Smallest extra shift (to 1 ms) restoring exit-lane compatibility.
    fn exit_delay(&self, cfg: &ControllerConfig, proposal: &Proposal<'_>, ahead: &TableRow, delay: f64) -> f64 {
        let Some(ego) = proposal.profile else { return delay };
        let ok = |d: f64| exit_compatible(cfg, ego, proposal, ahead, d);
        let mut lo = delay;
        let mut step = 0.1;
        let mut hi = delay + step;
        while !ok(hi) {
            lo = hi;
            step *= 2.0;
            hi += step;
            if hi - delay > 600.0 {
                return hi;
            }
        }
        while hi - lo > 1e-3 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

/// At the proposer's last-zone exit, the vehicle ahead must be at least
/// `safe_margin` ahead and slow enough to be followed with braking `brake`.
fn exit_compatible(
    cfg: &ControllerConfig,
    ego: &MobilityProfile,
    proposal: &Proposal<'_>,
    ahead: &TableRow,
    delay: f64,
) -> bool {
    let Some(ap) = &ahead.trajectory else { return true };
    let s_ego = proposal.path.last_zone_exit() + proposal.length;
    let Some(t_local) = ego.time_at(s_ego) else { return true };
    let t = t_local + delay;
    let v_ego = ego.speed_at(t_local);
    let x_ego = s_ego - proposal.path.exit_start;
    let (s_a, v_a, _) = ap.state_at(t);
    let x_a = s_a - ahead.exit_start;
    let gap = x_a - ahead.length - x_ego;
    gap >= cfg.safe_margin - 1e-9 && v_ego <= v_a + (2.0 * cfg.brake * (gap - cfg.safe_margin).max(0.0)).sqrt() + 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_layout, IntersectionLayout, LayoutKind, LayoutOverrides};

    fn layout() -> IntersectionLayout {
        build_layout(LayoutKind::FourWay1L, &LayoutOverrides::default()).unwrap()
    }

    fn zt(zone: u16, a: f64, b: f64) -> ZoneTime {
        ZoneTime {
            zone: ZoneId(zone),
            t_enter: a,
            t_exit: b,
        }
    }

    pub(crate) fn paper_table(l: &IntersectionLayout) -> SchedulingTable {
        let mut table = SchedulingTable::new();
        let rows = [
            (
                1,
                Road::West,
                Road::East,
                vec![zt(1, 152.0, 153.4), zt(2, 153.0, 153.9)],
            ),
            (
                2,
                Road::East,
                Road::West,
                vec![zt(3, 153.0, 153.9), zt(4, 153.5, 154.4)],
            ),
            (
                3,
                Road::South,
                Road::North,
                vec![zt(2, 154.5, 155.4), zt(3, 155.0, 155.9)],
            ),
        ];
        for (id, from, to, res) in rows {
            let path = l.path_between(from, to).unwrap();
            table
                .insert_row(TableRow {
                    cav_id: id,
                    trajectory: None,
                    path: path.id,
                    entry_lane: path.entry_lane,
                    exit_lane: path.exit_lane,
                    entry_road: from,
                    exit_road: to,
                    exit_start: path.exit_start,
                    length: 5.0,
                    reservations: res,
                })
                .unwrap();
        }
        table
    }

    #[test]
    fn paper_example_revise_then_accept() {
        let l = layout();
        let table = paper_table(&l);
        let cfg = ControllerConfig::default();
        let path = l.path_between(Road::East, Road::North).unwrap();
        let p = Proposal::from_zone_times(4, path, 5.0, vec![zt(3, 153.5, 154.5)]);
        let ValidationOutcome::Revise { windows, .. } = table.validate(&cfg, &p) else {
            panic!("expected revise");
        };
        assert_eq!(windows.len(), 1);
        assert!((windows[0].t_enter_min - 153.9).abs() < 1e-9);
        assert_eq!(windows[0].t_exit_max, 155.0);

        let again = Proposal::from_zone_times(4, path, 5.0, vec![zt(3, 153.9, 154.9)]);
        let ValidationOutcome::Accept { windows } = table.validate(&cfg, &again) else {
            panic!("expected accept");
        };
        assert!((windows[0].t_enter_min - 153.9).abs() < 1e-9);
        assert!((windows[0].t_exit_max - 155.0).abs() < 1e-9);
        let mut table = table;
        table.commit(&again, &windows).unwrap();
        assert_eq!(table.zone_intervals(ZoneId(3)).len(), 3);
        assert!(table.is_disjoint());
    }

    #[test]
    fn empty_table_accepts_with_widening() {
        let l = layout();
        let table = SchedulingTable::new();
        let cfg = ControllerConfig::default();
        let path = l.path_between(Road::West, Road::East).unwrap();
        let p = Proposal::from_zone_times(9, path, 5.0, vec![zt(1, 10.0, 11.0), zt(2, 10.5, 11.5)]);
        let ValidationOutcome::Accept { windows } = table.validate(&cfg, &p) else {
            panic!()
        };
        assert!((windows[0].t_enter_min - 9.9).abs() < 1e-12);
        assert!((windows[1].t_exit_max - 11.6).abs() < 1e-12);
    }

    #[test]
    fn duplicate_commit_fails() {
        let l = layout();
        let mut table = paper_table(&l);
        let path = l.path_between(Road::West, Road::East).unwrap();
        let p = Proposal::from_zone_times(1, path, 5.0, vec![zt(1, 200.0, 201.0)]);
        let w = [ZoneWindow {
            zone: ZoneId(1),
            t_enter_min: 200.0,
            t_exit_max: 201.0,
        }];
        assert_eq!(table.commit(&p, &w), Err(ControllerError::DuplicateCav(1)));
    }

    #[test]
    fn expiry_boundaries() {
        let l = layout();
        let mut table = paper_table(&l);
        assert!(table.expire_rows(153.9 - 0.1, 0.1).is_empty());
        assert_eq!(table.expire_rows(153.9 + 0.1 + 1e-6, 0.1), vec![1]);
        assert_eq!(table.len(), 2);
        let mut empty = SchedulingTable::new();
        assert!(empty.expire_rows(1e9, 0.1).is_empty());
        assert_eq!(table.remove(42), Err(ControllerError::UnknownCav(42)));
    }

    #[test]
    fn validation_is_idempotent() {
        let l = layout();
        let table = paper_table(&l);
        let cfg = ControllerConfig::default();
        let path = l.path_between(Road::East, Road::North).unwrap();
        let p = Proposal::from_zone_times(4, path, 5.0, vec![zt(3, 153.5, 154.5)]);
        assert_eq!(table.validate(&cfg, &p), table.validate(&cfg, &p));
    }

    #[test]
    fn csv_has_zone_columns() {
        let l = layout();
        let csv = paper_table(&l).to_csv(4);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "cav_id,trajectory,entry_road,exit_road,enter_1,exit_1,enter_2,exit_2,enter_3,exit_3,enter_4,exit_4"
        );
        assert_eq!(
            lines.next().unwrap(),
            "1,,West,East,152.000,153.400,153.000,153.900,,,,"
        );
    }
}
