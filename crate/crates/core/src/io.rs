//! On-disk formats.
//!
//! Binary container: the magic `PDMPCPD1`, a `u32` format version and a
//! `u32` section count, then sections of `[tag: 4 bytes][len: u64][payload]`.
//! Payloads are sequences of little-endian 8-byte words; counts and indices
//! are `u64`, everything else is `f64`.
//!
//! | tag    | one per | payload |
//! |--------|---------|---------|
//! | `OMEG` | step    | `n, ℓ_n, uses_aux, d+1`, mode table `(start, end)` per mode, Lloyd residual, then `ℓ_n × (x, u, rep_x, rep_phase, rep_u)` |
//! | `TRNS` | step    | `n, rows, cols`, row-major probabilities |
//! | `BELF` | step    | `n, N_n, ℓ_n`, observation scale, belief error, then `N_n × (θ_1..θ_ℓ, y·scale)` |
//! | `DEGN` | file    | degenerate update count |
//! | `SOLN` | step    | `n, N_n, ℓ_n`, then `N_n × (θ_1..θ_ℓ, y, v, r, a)` |
//! | `COST` | file    | `d`, `α, β, δ`, `N`, then `γ` row-major |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dp::{BeliefGrid, BeliefQuantization, PolicySolution};
use crate::error::{Error, Result};
use crate::kernel::CostParams;
use crate::model::{DiscreteState, FlowState, ObservationSequence};
use crate::quantize::{Codebook, GridPoint, QuantGrid, StateQuantization, TransitionMatrix};

pub const MAGIC: &[u8; 8] = b"PDMPCPD1";
pub const VERSION: u32 = 1;

pub type Tag = [u8; 4];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub tag: Tag,
    pub payload: Vec<u8>,
}

#[derive(Default)]
struct Words(Vec<u8>);

impl Words {
    fn u(&mut self, v: usize) -> &mut Self {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
        self
    }

    fn f(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    fn fs(&mut self, vs: &[f64]) -> &mut Self {
        vs.iter().for_each(|v| {
            self.f(*v);
        });
        self
    }

    fn section(self, tag: &Tag) -> Section {
        Section { tag: *tag, payload: self.0 }
    }
}

struct Cursor<'a> {
    tag: Tag,
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn new(s: &'a Section) -> Self {
        Self { tag: s.tag, bytes: &s.payload }
    }

    fn word(&mut self) -> Result<[u8; 8]> {
        if self.bytes.len() < 8 {
            return Err(Error::Format(format!("section {} is truncated", String::from_utf8_lossy(&self.tag))));
        }
        let (w, rest) = self.bytes.split_at(8);
        self.bytes = rest;
        Ok(w.try_into().unwrap())
    }

    fn u(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.word()?) as usize)
    }

    fn f(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.word()?))
    }

    fn fs(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.bytes.len() / 8 < n {
            return Err(Error::Format(format!("section {} is truncated", String::from_utf8_lossy(&self.tag))));
        }
        (0..n).map(|_| self.f()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes in section {}", self.bytes.len(), String::from_utf8_lossy(&self.tag))))
        }
    }
}

pub fn encode_container(sections: &[Section]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + sections.iter().map(|s| 12 + s.payload.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in sections {
        out.extend_from_slice(&s.tag);
        out.extend_from_slice(&(s.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&s.payload);
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<Section>> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a PDMPCPD1 container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut rest = &bytes[16..];
    let mut sections = Vec::with_capacity(count);
    for _ in 0..count {
        if rest.len() < 12 {
            return Err(bad("truncated section header"));
        }
        let tag: Tag = rest[..4].try_into().unwrap();
        let len = u64::from_le_bytes(rest[4..12].try_into().unwrap()) as usize;
        rest = &rest[12..];
        if rest.len() < len {
            return Err(bad("truncated section payload"));
        }
        sections.push(Section { tag, payload: rest[..len].to_vec() });
        rest = &rest[len..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after the last section"));
    }
    Ok(sections)
}

pub fn write_container(path: &Path, sections: &[Section]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_container(sections))?;
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Section>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

fn tagged<'a>(sections: &'a [Section], tag: &'a Tag) -> impl Iterator<Item = &'a Section> + 'a {
    sections.iter().filter(move |s| &s.tag == tag)
}

fn check_step(found: usize, expected: usize, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!("{what} sections out of order: step {found} where {expected} was expected")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// State grids
// ---------------------------------------------------------------------------

fn encode_transition(n: usize, t: &TransitionMatrix) -> Section {
    let mut w = Words::default();
    w.u(n).u(t.rows).u(t.cols).fs(&t.data);
    w.section(b"TRNS")
}

fn decode_transitions(sections: &[Section]) -> Result<Vec<TransitionMatrix>> {
    tagged(sections, b"TRNS")
        .enumerate()
        .map(|(k, s)| {
            let mut c = Cursor::new(s);
            check_step(c.u()?, k, "TRNS")?;
            let (rows, cols) = (c.u()?, c.u()?);
            let data = c.fs(rows * cols)?;
            c.finish()?;
            Ok(TransitionMatrix { rows, cols, data })
        })
        .collect()
}

pub fn encode_state_quantization(sq: &StateQuantization) -> Vec<Section> {
    let mut out = Vec::with_capacity(2 * sq.grids.len());
    for g in &sq.grids {
        let mut w = Words::default();
        w.u(g.n).u(g.len()).u(g.uses_aux as usize).u(g.mode_ranges.len());
        for r in &g.mode_ranges {
            w.u(r.start).u(r.end);
        }
        w.f(g.lloyd_residual);
        for (p, rep) in g.points.iter().zip(&g.representatives) {
            w.f(p.x).f(p.u).f(rep.flow.x).f(rep.flow.phase).f(rep.flow.u);
        }
        out.push(w.section(b"OMEG"));
    }
    out.extend(sq.transitions.iter().enumerate().map(|(n, t)| encode_transition(n, t)));
    out
}

pub fn decode_state_quantization(sections: &[Section]) -> Result<StateQuantization> {
    let mut grids = Vec::new();
    for (k, s) in tagged(sections, b"OMEG").enumerate() {
        let mut c = Cursor::new(s);
        let n = c.u()?;
        check_step(n, k, "OMEG")?;
        let (len, uses_aux, modes) = (c.u()?, c.u()? != 0, c.u()?);
        let mut mode_of = vec![usize::MAX; len];
        let mut mode_ranges = Vec::with_capacity(modes);
        for m in 0..modes {
            let (start, end) = (c.u()?, c.u()?);
            if start > end || end > len {
                return Err(Error::Format(format!("bad mode table on grid {n}")));
            }
            mode_of[start..end].iter_mut().for_each(|v| *v = m);
            mode_ranges.push(start..end);
        }
        if mode_of.contains(&usize::MAX) {
            return Err(Error::Format(format!("mode table of grid {n} does not cover every point")));
        }
        let lloyd_residual = c.f()?;
        let mut points = Vec::with_capacity(len);
        let mut representatives = Vec::with_capacity(len);
        for mode in mode_of {
            let v = c.fs(5)?;
            points.push(GridPoint { mode, x: v[0], u: v[1] });
            representatives.push(DiscreteState { mode, flow: FlowState { x: v[2], phase: v[3], u: v[4] } });
        }
        c.finish()?;
        grids.push(QuantGrid { n, uses_aux, points, representatives, mode_ranges, lloyd_residual });
    }
    let transitions = decode_transitions(sections)?;
    if grids.is_empty() || transitions.len() + 1 != grids.len() {
        return Err(Error::Format(format!("{} state grids with {} transition matrices", grids.len(), transitions.len())));
    }
    Ok(StateQuantization { grids, transitions })
}

// ---------------------------------------------------------------------------
// Belief grids
// ---------------------------------------------------------------------------

pub fn encode_belief_quantization(bq: &BeliefQuantization) -> Vec<Section> {
    let mut out = Vec::with_capacity(2 * bq.grids.len() + 1);
    for (g, l1) in bq.grids.iter().zip(bq.belief_l1.iter().chain(std::iter::repeat(&f64::NAN))) {
        let mut w = Words::default();
        w.u(g.n).u(g.len()).u(g.belief_dim()).f(g.obs_scale).f(*l1).fs(&g.book.points);
        out.push(w.section(b"BELF"));
    }
    out.extend(bq.transitions.iter().enumerate().map(|(n, t)| encode_transition(n, t)));
    let mut w = Words::default();
    w.u(bq.degenerate_updates as usize);
    out.push(w.section(b"DEGN"));
    out
}

pub fn decode_belief_quantization(sections: &[Section]) -> Result<BeliefQuantization> {
    let mut grids = Vec::new();
    let mut belief_l1 = Vec::new();
    for (k, s) in tagged(sections, b"BELF").enumerate() {
        let mut c = Cursor::new(s);
        let n = c.u()?;
        check_step(n, k, "BELF")?;
        let (len, dim) = (c.u()?, c.u()?);
        let obs_scale = c.f()?;
        belief_l1.push(c.f()?);
        let points = c.fs(len * (dim + 1))?;
        c.finish()?;
        grids.push(BeliefGrid { n, obs_scale, book: Codebook::new(dim + 1, points) });
    }
    let transitions = decode_transitions(sections)?;
    if grids.is_empty() || transitions.len() + 1 != grids.len() {
        return Err(Error::Format(format!("{} belief grids with {} transition matrices", grids.len(), transitions.len())));
    }
    let degenerate_updates = match tagged(sections, b"DEGN").next() {
        Some(s) => {
            let mut c = Cursor::new(s);
            let v = c.u()? as u64;
            c.finish()?;
            v
        }
        None => 0,
    };
    Ok(BeliefQuantization { grids, transitions, belief_l1, degenerate_updates })
}

// ---------------------------------------------------------------------------
// Solutions
// ---------------------------------------------------------------------------

fn encode_costs(c: &CostParams) -> Section {
    let mut w = Words::default();
    w.u(c.num_post_modes()).f(c.alpha).f(c.beta).f(c.delta).u(c.horizon);
    c.gamma.iter().for_each(|row| {
        w.fs(row);
    });
    w.section(b"COST")
}

fn decode_costs(s: &Section) -> Result<CostParams> {
    let mut c = Cursor::new(s);
    let d = c.u()?;
    let (alpha, beta, delta) = (c.f()?, c.f()?, c.f()?);
    let horizon = c.u()?;
    let gamma = (0..d).map(|_| c.fs(d)).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    let params = CostParams { alpha, beta, gamma, delta, horizon };
    params.validate()?;
    Ok(params)
}

/// The belief grids are needed to write the `(θ, y)` columns of each point.
pub fn encode_solution(solution: &PolicySolution, beliefs: &BeliefQuantization) -> Result<Vec<Section>> {
    if solution.values.len() != beliefs.grids.len() {
        return Err(Error::Shape(format!("{} solved steps for {} belief grids", solution.values.len(), beliefs.grids.len())));
    }
    let mut out = Vec::with_capacity(solution.values.len() + 1);
    for (n, g) in beliefs.grids.iter().enumerate() {
        if solution.values[n].len() != g.len() {
            return Err(Error::Shape(format!("step {n}: {} values for {} grid points", solution.values[n].len(), g.len())));
        }
        let mut w = Words::default();
        w.u(n).u(g.len()).u(g.belief_dim());
        for i in 0..g.len() {
            w.fs(g.weights(i))
                .f(g.observation(i))
                .f(solution.values[n][i])
                .f(if solution.stop[n][i] { 1.0 } else { 0.0 })
                .f(solution.action[n][i] as f64);
        }
        out.push(w.section(b"SOLN"));
    }
    if let Some(c) = &solution.costs {
        out.push(encode_costs(c));
    }
    Ok(out)
}

/// A solved table with the `(θ, y)` coordinates of each grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionFile {
    pub solution: PolicySolution,
    /// `points[n][i] = (θ, y)`.
    pub points: Vec<Vec<(Vec<f64>, f64)>>,
}

pub fn decode_solution(sections: &[Section]) -> Result<SolutionFile> {
    let mut solution = PolicySolution { values: vec![], stop: vec![], action: vec![], costs: None };
    let mut points = Vec::new();
    for (k, s) in tagged(sections, b"SOLN").enumerate() {
        let mut c = Cursor::new(s);
        check_step(c.u()?, k, "SOLN")?;
        let (len, dim) = (c.u()?, c.u()?);
        let (mut v, mut r, mut a, mut p) = (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
        for _ in 0..len {
            let row = c.fs(dim + 4)?;
            p.push((row[..dim].to_vec(), row[dim]));
            v.push(row[dim + 1]);
            r.push(row[dim + 2] != 0.0);
            a.push(row[dim + 3] as usize);
        }
        c.finish()?;
        solution.values.push(v);
        solution.stop.push(r);
        solution.action.push(a);
        points.push(p);
    }
    if solution.values.is_empty() {
        return Err(Error::Format("no SOLN sections".into()));
    }
    solution.costs = tagged(sections, b"COST").next().map(decode_costs).transpose()?;
    Ok(SolutionFile { solution, points })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GridRow {
    n: usize,
    index: usize,
    mode: usize,
    x: f64,
    u: f64,
}

pub fn write_grids_csv(path: &Path, sq: &StateQuantization) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for g in &sq.grids {
        for (i, p) in g.points.iter().enumerate() {
            w.serialize(GridRow { n: g.n, index: i, mode: p.mode, x: p.x, u: p.u })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_transitions_csv(path: &Path, transitions: &[TransitionMatrix]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "from", "to", "probability"])?;
    for (n, t) in transitions.iter().enumerate() {
        for i in 0..t.rows {
            for j in 0..t.cols {
                let p = t.get(i, j);
                if p > 0.0 {
                    w.write_record([n.to_string(), i.to_string(), j.to_string(), p.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One line per `Γ_n` point: `n, index, y, value, stop, action, θ_1..θ_ℓ`.
/// Rows have different lengths across steps.
pub fn write_solution_csv(path: &Path, solution: &PolicySolution, beliefs: &BeliefQuantization) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    w.write_record(["n", "index", "y", "value", "stop", "action", "weights..."])?;
    for (n, g) in beliefs.grids.iter().enumerate() {
        for i in 0..g.len() {
            let mut rec = vec![
                n.to_string(),
                i.to_string(),
                g.observation(i).to_string(),
                solution.values[n][i].to_string(),
                (solution.stop[n][i] as u8).to_string(),
                solution.action[n][i].to_string(),
            ];
            rec.extend(g.weights(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads one observation stream: a single column `y` (header optional), or
/// a `n,y` table.
pub fn read_observations_csv(path: &Path) -> Result<ObservationSequence> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(path)?;
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let Some(field) = rec.get(rec.len().saturating_sub(1)) else { continue };
        match field.trim().parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if line == 0 => {}
            Err(_) => return Err(Error::Format(format!("line {}: `{field}` is not a number", line + 1))),
        }
    }
    Ok(ObservationSequence { values })
}

pub fn write_observations_csv(path: &Path, obs: &ObservationSequence, delta: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "t", "y"])?;
    for (n, y) in obs.values.iter().enumerate() {
        w.write_record([n.to_string(), (n as f64 * delta).to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{backward_solve, build_belief_grids, BeliefConfig};
    use crate::model::{FlowFamily, NoiseSpec, PdmpModel};
    use crate::quantize::{quantize_state_chain, QuantConfig};

    fn small() -> (PdmpModel, StateQuantization, BeliefQuantization, PolicySolution) {
        let m = PdmpModel::new(FlowFamily::Exponential, vec![0.5, 1.0], NoiseSpec::new(0.5, None).unwrap(), 0.5, 4).unwrap();
        let qc = QuantConfig { size: 5, clvq_samples: 5000, lloyd_samples: 2000, lloyd_iterations: 20, transition_samples: 5000, ..Default::default() };
        let sq = quantize_state_chain(&m, &qc).unwrap();
        let bc = BeliefConfig { size: 6, chains: 2000, ..Default::default() };
        let bq = build_belief_grids(&m, &sq, &bc).unwrap();
        let costs = CostParams::uniform(4.0, 1.0, 1.5, 2, 0.5, 4).unwrap();
        let sol = backward_solve(&bq, &sq.grids, &costs).unwrap();
        (m, sq, bq, sol)
    }

    #[test]
    fn containers_round_trip_bitwise() {
        let (_, sq, bq, sol) = small();
        let back = decode_state_quantization(&decode_container(&encode_container(&encode_state_quantization(&sq))).unwrap()).unwrap();
        assert_eq!(back, sq);
        let back = decode_belief_quantization(&decode_container(&encode_container(&encode_belief_quantization(&bq))).unwrap()).unwrap();
        assert_eq!(back, bq);
        let file = decode_solution(&decode_container(&encode_container(&encode_solution(&sol, &bq).unwrap())).unwrap()).unwrap();
        assert_eq!(file.solution, sol);
        assert_eq!(file.points[2].len(), bq.grids[2].len());
        assert_eq!(file.points[2][0].0, bq.grids[2].weights(0));
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let (_, sq, ..) = small();
        let bytes = encode_container(&encode_state_quantization(&sq));
        assert!(decode_container(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_container(&bad).is_err());
        let mut secs = decode_container(&bytes).unwrap();
        secs[0].payload.pop();
        assert!(decode_state_quantization(&secs).is_err());
        secs.remove(0);
        assert!(decode_state_quantization(&secs).is_err());
    }

    #[test]
    fn files_and_csv() {
        let (m, sq, bq, sol) = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        write_container(&p, &encode_state_quantization(&sq)).unwrap();
        assert_eq!(decode_state_quantization(&read_container(&p).unwrap()).unwrap(), sq);
        write_grids_csv(&dir.path().join("g.csv"), &sq).unwrap();
        write_transitions_csv(&dir.path().join("t.csv"), &sq.transitions).unwrap();
        write_solution_csv(&dir.path().join("v.csv"), &sol, &bq).unwrap();
        let rows = std::fs::read_to_string(dir.path().join("g.csv")).unwrap().lines().count();
        assert_eq!(rows, 1 + sq.grids.iter().map(|g| g.len()).sum::<usize>());
        let obs = ObservationSequence { values: vec![1.0, 0.5, -2.25] };
        let op = dir.path().join("o.csv");
        write_observations_csv(&op, &obs, m.delta).unwrap();
        assert_eq!(read_observations_csv(&op).unwrap(), obs);
        std::fs::write(&op, "1.5\n2\n").unwrap();
        assert_eq!(read_observations_csv(&op).unwrap().values, vec![1.5, 2.0]);
    }
}
