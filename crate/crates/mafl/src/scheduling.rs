//! Reception/upload indicator matrices, the derived scheduling tensor and feasibility checks.
//!
//! Convention: `upload[i][g]` marks that device `i` starts a local period from the
//! global model of aggregation `g`; `receive[i][g']` marks that the server takes a
//! model from device `i` at aggregation `g'`. A tensor entry `(i, g, g')` links the two.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Binary device x aggregation matrix stored row-major; `m[i][g]` indexes it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Indicator {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Indicator {
    pub fn new(rows: usize, cols: usize) -> Self {
        Indicator { rows, cols, bits: vec![false; rows * cols] }
    }

    /// From nested rows; `None` when the rows are ragged.
    pub fn from_rows(rows: &[Vec<bool>]) -> Option<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return None;
        }
        Some(Indicator { rows: rows.len(), cols, bits: rows.concat() })
    }

    /// Number of devices.
    #[inline]
    pub fn len(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Number of aggregations.
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn iter(&self) -> impl Iterator<Item = &[bool]> + '_ {
        (0..self.rows).map(move |i| &self[i])
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.iter().map(<[bool]>::to_vec).collect()
    }
}

impl Index<usize> for Indicator {
    type Output = [bool];

    #[inline]
    fn index(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }
}

impl IndexMut<usize> for Indicator {
    #[inline]
    fn index_mut(&mut self, i: usize) -> &mut [bool] {
        &mut self.bits[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("indicator shape mismatch: expected {devices} x {aggregations}")]
    Shape { devices: usize, aggregations: usize },
    #[error("no scheduled uploads")]
    Empty,
    #[error("instance too large to enumerate ({devices} devices x {aggregations} aggregations)")]
    TooLarge { devices: usize, aggregations: usize },
    #[error("tensor entry ({0}, {1}, {2}) is out of range")]
    EntryOutOfRange(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleLimits {
    pub staleness_limit: usize,
    pub num_aggregations: usize,
}

/// Schedule of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTensor {
    pub receive: Indicator,
    pub upload: Indicator,
    /// Sorted (device, g, g') triples with X = 1.
    pub entries: Vec<(usize, usize, usize)>,
    pub limits: ScheduleLimits,
}

/// Schedules of every task, indexed by task.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub tasks: Vec<ScheduleTensor>,
}

impl ScheduleTensor {
    pub fn num_devices(&self) -> usize {
        self.upload.len()
    }

    pub fn num_aggregations(&self) -> usize {
        self.limits.num_aggregations
    }

    pub fn x(&self, i: usize, g: usize, gp: usize) -> bool {
        self.entries.binary_search(&(i, g, gp)).is_ok()
    }

    /// Entries completing aggregation `gp`.
    pub fn arrivals(&self, gp: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().filter(move |e| e.2 == gp).map(|e| (e.0, e.1))
    }

    /// Devices dispatched from the model of aggregation `g`.
    pub fn uploaders(&self, g: usize) -> Vec<usize> {
        (0..self.num_devices()).filter(|&i| self.upload[i][g]).collect()
    }

    /// Number of tensor entries in row (i, g).
    pub fn row_count(&self, i: usize, g: usize) -> usize {
        self.entries.iter().filter(|e| e.0 == i && e.1 == g).count()
    }

    /// Build directly from triples, for tensors that do not come from indicators.
    /// The indicators are filled with the marks the triples imply.
    pub fn from_triples(
        num_devices: usize,
        limits: ScheduleLimits,
        triples: &[(usize, usize, usize)],
    ) -> Result<Self, ScheduleError> {
        let g_n = limits.num_aggregations;
        let mut receive = Indicator::new(num_devices, g_n);
        let mut upload = Indicator::new(num_devices, g_n);
        let mut entries = Vec::with_capacity(triples.len());
        for &(i, g, gp) in triples {
            if i >= num_devices || gp >= g_n || g > gp {
                return Err(ScheduleError::EntryOutOfRange(i, g, gp));
            }
            upload[i][g] = true;
            receive[i][gp] = true;
            entries.push((i, g, gp));
        }
        entries.sort_unstable();
        entries.dedup();
        Ok(ScheduleTensor { receive, upload, entries, limits })
    }
}

fn check_shape(m: &Indicator, devices: usize, aggregations: usize) -> Result<(), ScheduleError> {
    if m.len() != devices || (devices > 0 && m.cols() != aggregations) {
        return Err(ScheduleError::Shape { devices, aggregations });
    }
    Ok(())
}

/// X^{g,g'} = U^(g) R^(g') Π_{k=g+1}^{g'-1} (1 - U^(k)) for 0 ≤ g' - g ≤ K.
pub fn build_tensor(
    receive: &Indicator,
    upload: &Indicator,
    limits: ScheduleLimits,
) -> Result<ScheduleTensor, ScheduleError> {
    let devices = upload.len();
    let g_n = limits.num_aggregations;
    check_shape(upload, devices, g_n)?;
    check_shape(receive, devices, g_n)?;
    // Each reception closes at most two spans: the open one and one starting at the
    // same g'. Candidates are written unconditionally and kept by advancing `len`, so
    // the loop has no data-dependent branches.
    let mut entries = vec![(0, 0, 0); 2 * receive.count_ones() + 1];
    let mut len = 0;
    for i in 0..devices {
        let (r, u) = (&receive[i], &upload[i]);
        // latest dispatch so far; a later upload closes it for every later g'
        let mut open = 0;
        let mut has_open = false;
        for gp in 0..g_n {
            let live = has_open & (gp.wrapping_sub(open) <= limits.staleness_limit);
            entries[len] = (i, open, gp);
            len += (r[gp] & live) as usize;
            entries[len] = (i, gp, gp);
            len += (r[gp] & u[gp]) as usize;
            open = if u[gp] { gp } else { open };
            has_open |= u[gp];
        }
    }
    entries.truncate(len);
    Ok(ScheduleTensor { receive: receive.clone(), upload: upload.clone(), entries, limits })
}

/// Largest g' - g over entries.
pub fn staleness(tensor: &ScheduleTensor) -> Result<usize, ScheduleError> {
    tensor
        .entries
        .iter()
        .map(|&(_, g, gp)| gp - g)
        .max()
        .ok_or(ScheduleError::Empty)
}

/// Scheduling constraints checked by [`check_schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleConstraint {
    ReceptionCount,
    SingleUploader,
    UploadCount,
    IdleGating,
    UploadOrder,
    Staleness,
}

impl ScheduleConstraint {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleConstraint::ReceptionCount => "reception_count",
            ScheduleConstraint::SingleUploader => "single_uploader",
            ScheduleConstraint::UploadCount => "upload_count",
            ScheduleConstraint::IdleGating => "idle_gating",
            ScheduleConstraint::UploadOrder => "upload_order",
            ScheduleConstraint::Staleness => "staleness",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleViolation {
    pub constraint: ScheduleConstraint,
    pub device: Option<usize>,
    pub aggregation: Option<usize>,
    pub message: String,
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.constraint.name())?;
        if let Some(i) = self.device {
            write!(f, " device={i}")?;
        }
        if let Some(g) = self.aggregation {
            write!(f, " g={g}")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Per-(device, aggregation) local-period lengths and idle times of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodTable {
    pub local: Vec<Vec<f64>>,
    pub idle: Vec<Vec<f64>>,
}

fn violation(
    c: ScheduleConstraint,
    device: Option<usize>,
    aggregation: Option<usize>,
    message: String,
) -> ScheduleViolation {
    ScheduleViolation { constraint: c, device, aggregation, message }
}

/// Check every scheduling constraint. Period-dependent checks run only when `periods` is given.
pub fn check_schedule(
    tensor: &ScheduleTensor,
    periods: Option<&PeriodTable>,
) -> Vec<ScheduleViolation> {
    let mut out = Vec::new();
    let g_n = tensor.num_aggregations();
    let k = tensor.limits.staleness_limit;
    let devices = tensor.num_devices();

    let received = tensor.receive.count_ones();
    if received < g_n || received > g_n + k {
        out.push(violation(
            ScheduleConstraint::ReceptionCount,
            None,
            None,
            format!("{received} receptions outside [{g_n}, {}]", g_n + k),
        ));
    }
    for g in 0..g_n {
        let n = (0..devices).filter(|&i| tensor.upload[i][g]).count();
        if n != 1 {
            out.push(violation(
                ScheduleConstraint::SingleUploader,
                None,
                Some(g),
                format!("{n} uploaders instead of exactly one"),
            ));
        }
    }
    let uploads = tensor.upload.count_ones();
    if uploads != g_n {
        out.push(violation(
            ScheduleConstraint::UploadCount,
            None,
            None,
            format!("{uploads} uploads instead of {g_n}"),
        ));
    }
    for &(i, g, gp) in &tensor.entries {
        if gp - g > k {
            out.push(violation(
                ScheduleConstraint::Staleness,
                Some(i),
                Some(g),
                format!("entry to aggregation {gp} exceeds staleness limit {k}"),
            ));
        }
    }

    if let Some(p) = periods {
        for i in 0..devices {
            for g in 0..g_n {
                if !tensor.upload[i][g] && p.idle[i][g] != 0.0 {
                    out.push(violation(
                        ScheduleConstraint::IdleGating,
                        Some(i),
                        Some(g),
                        format!("idle {} on an inactive slot", p.idle[i][g]),
                    ));
                }
            }
        }
        let cum = |i: usize, upto: usize| p.local[i][..upto].iter().sum::<f64>();
        for g in 0..g_n.saturating_sub(1) {
            let lhs: f64 = (0..devices).filter(|&i| tensor.upload[i][g]).map(|i| cum(i, g)).sum();
            let rhs: f64 =
                (0..devices).filter(|&i| tensor.upload[i][g + 1]).map(|i| cum(i, g + 1)).sum();
            if lhs > rhs + 1e-9 * lhs.abs().max(1.0) {
                out.push(violation(
                    ScheduleConstraint::UploadOrder,
                    None,
                    Some(g),
                    format!("period start {lhs} of aggregation {g} after {rhs} of aggregation {}", g + 1),
                ));
            }
        }
    }
    out
}

/// Receptions implied by uploads when every dispatched model completes the next
/// aggregation (lag 1), or the same one when the staleness limit is zero.
///
/// With lag 1 the reception slot at aggregation 0 goes to the device after the
/// first uploader so the reception count still reaches G.
pub fn lagged_receptions(upload: &Indicator, staleness_limit: usize) -> Indicator {
    let devices = upload.len();
    let g_n = upload.cols();
    if staleness_limit == 0 || g_n == 0 {
        return upload.clone();
    }
    let mut r = Indicator::new(devices, g_n);
    for i in 0..devices {
        for g in 1..g_n {
            r[i][g] = upload[i][g - 1];
        }
        r[i][0] = upload[(i + 1) % devices][0];
    }
    r
}

/// Round-robin uploads (device g mod I at aggregation g) with lagged receptions.
pub fn round_robin(num_devices: usize, limits: ScheduleLimits) -> ScheduleTensor {
    let g_n = limits.num_aggregations;
    let mut upload = Indicator::new(num_devices, g_n);
    for g in 0..g_n {
        upload[g % num_devices][g] = true;
    }
    let receive = lagged_receptions(&upload, limits.staleness_limit);
    build_tensor(&receive, &upload, limits).expect("shapes are consistent")
}

/// Every (R, U) pair satisfying the combinatorial constraints (period checks skipped).
pub fn enumerate_feasible(
    num_devices: usize,
    limits: ScheduleLimits,
) -> Result<Vec<(Indicator, Indicator)>, ScheduleError> {
    const MAX_RESULTS: usize = 2_000_000;
    let g_n = limits.num_aggregations;
    let cells = num_devices * g_n;
    if num_devices == 0 || cells > 20 {
        return Err(ScheduleError::TooLarge { devices: num_devices, aggregations: g_n });
    }
    let lo = g_n;
    let hi = g_n + limits.staleness_limit;
    let masks: Vec<u32> = (0u32..1 << cells)
        .filter(|m| (lo..=hi).contains(&(m.count_ones() as usize)))
        .collect();
    let u_choices = num_devices.pow(g_n as u32);
    if masks.len().saturating_mul(u_choices) > MAX_RESULTS {
        return Err(ScheduleError::TooLarge { devices: num_devices, aggregations: g_n });
    }
    let mut out = Vec::with_capacity(masks.len() * u_choices);
    for code in 0..u_choices {
        let mut upload = Indicator::new(num_devices, g_n);
        let mut c = code;
        for g in 0..g_n {
            upload[c % num_devices][g] = true;
            c /= num_devices;
        }
        for &m in &masks {
            let mut receive = Indicator::new(num_devices, g_n);
            for i in 0..num_devices {
                for g in 0..g_n {
                    receive[i][g] = m >> (i * g_n + g) & 1 == 1;
                }
            }
            out.push((receive, upload.clone()));
        }
    }
    Ok(out)
}
