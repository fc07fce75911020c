//! Analytic network model: per-round bandwidth draws, equal link sharing,
//! communication/computation time and the traffic ledger.
//!
//! Units are bits and Mbps (10^6 bits/s); reports convert to MB at 8x10^6 bits.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::Topology;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const BITS_PER_MEGABIT: f64 = 1e6;
pub const BITS_PER_MEGABYTE: f64 = 8e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthRange {
    pub min_mbps: f64,
    pub max_mbps: f64,
}

impl Default for BandwidthRange {
    fn default() -> Self {
        Self {
            min_mbps: 5.0,
            max_mbps: 20.0,
        }
    }
}

impl BandwidthRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_mbps > 0.0 && self.min_mbps <= self.max_mbps && self.max_mbps.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < min_mbps <= max_mbps, got [{}, {}]",
                self.min_mbps, self.max_mbps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerBandwidth {
    pub inbound: f64,
    pub outbound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthState {
    pub round: usize,
    pub range: BandwidthRange,
    pub workers: Vec<WorkerBandwidth>,
}

/// Independent uniform in/out draws per worker; the stream depends only on `(seed, round)`.
pub fn sample_bandwidth(
    m: usize,
    round: usize,
    seed: u64,
    range: BandwidthRange,
) -> BandwidthState {
    let mut rng = stream_rng(seed, Stream::Bandwidth, round as u64);
    let mut draw = || {
        if range.min_mbps == range.max_mbps {
            range.min_mbps
        } else {
            rng.random_range(range.min_mbps..=range.max_mbps)
        }
    };
    let workers = (0..m)
        .map(|_| {
            let inbound = draw();
            let outbound = draw();
            WorkerBandwidth { inbound, outbound }
        })
        .collect();
    BandwidthState {
        round,
        range,
        workers,
    }
}

/// `min(b_out_i / |N_i|, b_in_j / |N_j|)` in Mbps.
pub fn link_bandwidth(i: usize, j: usize, topology: &Topology, bw: &BandwidthState) -> Result<f64> {
    if i == j || !topology.has_edge(i, j) {
        return Err(Error::config(format!("({i}, {j}) is not a topology edge")));
    }
    let out_share = bw.workers[i].outbound / topology.degree(i) as f64;
    let in_share = bw.workers[j].inbound / topology.degree(j) as f64;
    Ok(out_share.min(in_share))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommTime {
    pub seconds: f64,
    /// The worker had no neighbours, so nothing was exchanged.
    pub isolated: bool,
}

/// `max_j r E_ij / b_ij + max_j |w| / b_ij`.
///
/// `nominal_bits[j]` is the unsampled embedding volume on link `(i, j)`.
pub fn comm_time(
    i: usize,
    topology: &Topology,
    ratio: f64,
    nominal_bits: &[f64],
    model_bits: f64,
    bw: &BandwidthState,
) -> Result<CommTime> {
    let nbrs = topology.neighbors(i);
    if nbrs.is_empty() {
        return Ok(CommTime {
            seconds: 0.0,
            isolated: true,
        });
    }
    let mut embed = 0.0f64;
    let mut model = 0.0f64;
    for j in nbrs {
        let b = link_bandwidth(i, j, topology, bw)? * BITS_PER_MEGABIT;
        embed = embed.max(ratio * nominal_bits[j] / b);
        model = model.max(model_bits / b);
    }
    Ok(CommTime {
        seconds: embed + model,
        isolated: false,
    })
}

/// Linear compute model: `cost_per_row * rows / speed`.
pub fn compute_time(aggregated_rows: u64, cost_per_row: f64, speed: f64) -> f64 {
    cost_per_row * aggregated_rows as f64 / speed
}

/// Speed tiers modelled on a mix of small, mid and large edge boards.
pub fn default_speed_factors(m: usize) -> Vec<f64> {
    const TIERS: [f64; 10] = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 2.0, 4.0];
    (0..m).map(|i| TIERS[i % TIERS.len()]).collect()
}

pub fn round_time(per_worker: &[f64]) -> f64 {
    per_worker.iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub compute: Vec<f64>,
    pub comm: Vec<f64>,
    pub total: Vec<f64>,
    pub round: f64,
    pub isolated: Vec<bool>,
}

impl TimingReport {
    pub fn new(compute: Vec<f64>, comm: Vec<CommTime>) -> Self {
        let total: Vec<f64> = compute
            .iter()
            .zip(&comm)
            .map(|(a, b)| a + b.seconds)
            .collect();
        Self {
            round: round_time(&total),
            isolated: comm.iter().map(|c| c.isolated).collect(),
            comm: comm.iter().map(|c| c.seconds).collect(),
            compute,
            total,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkBits {
    pub embed: u64,
    pub model: u64,
}

impl LinkBits {
    pub fn total(&self) -> u64 {
        self.embed + self.model
    }
}

/// One round of traffic, booked independently by senders and receivers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub sent: BTreeMap<(usize, usize), LinkBits>,
    pub received: BTreeMap<(usize, usize), LinkBits>,
}

impl RoundTraffic {
    pub fn embed_bits(&self) -> u64 {
        self.sent.values().map(|b| b.embed).sum()
    }

    pub fn model_bits(&self) -> u64 {
        self.sent.values().map(|b| b.model).sum()
    }

    pub fn embed_between(&self, a: usize, b: usize) -> u64 {
        self.sent.get(&(a, b)).map_or(0, |x| x.embed)
            + self.sent.get(&(b, a)).map_or(0, |x| x.embed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficLedger {
    pub rounds: Vec<RoundTraffic>,
    /// Unsampled per-round embedding volume per ordered link.
    pub nominal: Vec<Vec<f64>>,
}

impl TrafficLedger {
    pub fn new(nominal: Vec<Vec<f64>>) -> Self {
        Self {
            rounds: Vec::new(),
            nominal,
        }
    }

    pub fn begin_round(&mut self, round: usize) {
        self.rounds.push(RoundTraffic {
            round,
            ..RoundTraffic::default()
        });
    }

    fn current(&mut self) -> &mut RoundTraffic {
        self.rounds.last_mut().expect("begin_round first")
    }

    pub fn record_send(&mut self, src: usize, dst: usize, embed: u64, model: u64) {
        let e = self.current().sent.entry((src, dst)).or_default();
        e.embed += embed;
        e.model += model;
    }

    pub fn record_receive(&mut self, src: usize, dst: usize, embed: u64, model: u64) {
        let e = self.current().received.entry((src, dst)).or_default();
        e.embed += embed;
        e.model += model;
    }

    pub fn current_round(&self) -> Option<&RoundTraffic> {
        self.rounds.last()
    }

    /// First round whose sender and receiver books disagree.
    pub fn conservation_violation(&self) -> Option<usize> {
        self.rounds
            .iter()
            .find(|r| r.sent != r.received)
            .map(|r| r.round)
    }

    pub fn cumulative_embed_bits(&self) -> u64 {
        self.rounds.iter().map(RoundTraffic::embed_bits).sum()
    }

    pub fn cumulative_model_bits(&self) -> u64 {
        self.rounds.iter().map(RoundTraffic::model_bits).sum()
    }

    /// `round,src,dst,embed_bits,model_bits`, sender-side books.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "round,src,dst,embed_bits,model_bits")?;
        for r in &self.rounds {
            for (&(src, dst), bits) in &r.sent {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.round, src, dst, bits.embed, bits.model
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(pairs: &[(f64, f64)]) -> BandwidthState {
        BandwidthState {
            round: 0,
            range: BandwidthRange::default(),
            workers: pairs
                .iter()
                .map(|&(inbound, outbound)| WorkerBandwidth { inbound, outbound })
                .collect(),
        }
    }

    #[test]
    fn link_bandwidth_hand_example() {
        // i=0 has 2 neighbours, j=1 has 3.
        let t = Topology::from_edges(5, [(0, 1), (0, 2), (1, 3), (1, 4)]).unwrap();
        let bw = fixed(&[(0.0, 10.0), (12.0, 0.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(link_bandwidth(0, 1, &t, &bw).unwrap(), 4.0);
        assert!(link_bandwidth(0, 3, &t, &bw).is_err());
    }

    #[test]
    fn symmetric_single_link() {
        let t = Topology::complete(2);
        let bw = fixed(&[(8.0, 8.0), (8.0, 8.0)]);
        assert_eq!(link_bandwidth(0, 1, &t, &bw).unwrap(), 8.0);
        assert_eq!(link_bandwidth(1, 0, &t, &bw).unwrap(), 8.0);
    }

    #[test]
    fn comm_time_hand_example() {
        let t = Topology::complete(2);
        let bw = fixed(&[(4.0, 4.0), (4.0, 4.0)]);
        let c = comm_time(0, &t, 0.5, &[0.0, 80e6], 8e6, &bw).unwrap();
        assert_eq!(c.seconds, 12.0);
        assert!(!c.isolated);
        let c = comm_time(0, &t, 0.0, &[0.0, 80e6], 8e6, &bw).unwrap();
        assert_eq!(c.seconds, 2.0);
    }

    #[test]
    fn isolated_worker_has_zero_comm_time() {
        let t = Topology::empty(3);
        let bw = fixed(&[(4.0, 4.0); 3]);
        let c = comm_time(1, &t, 1.0, &[1.0; 3], 1.0, &bw).unwrap();
        assert_eq!(
            c,
            CommTime {
                seconds: 0.0,
                isolated: true
            }
        );
    }

    #[test]
    fn constant_range_gives_constant_bandwidth() {
        let range = BandwidthRange {
            min_mbps: 10.0,
            max_mbps: 10.0,
        };
        let bw = sample_bandwidth(6, 3, 1, range);
        assert!(bw
            .workers
            .iter()
            .all(|w| w.inbound == 10.0 && w.outbound == 10.0));
        assert_eq!(bw, sample_bandwidth(6, 3, 1, range));
    }

    #[test]
    fn compute_time_examples() {
        assert_eq!(compute_time(0, 1e-3, 1.0), 0.0);
        assert_eq!(
            compute_time(200, 1e-3, 1.0),
            2.0 * compute_time(100, 1e-3, 1.0)
        );
        let times: Vec<f64> = [1.0, 2.0, 4.0]
            .iter()
            .map(|&s| compute_time(400, 1e-2, s))
            .collect();
        assert_eq!(times, vec![4.0, 2.0, 1.0]);
    }

    #[test]
    fn round_time_is_max() {
        assert_eq!(round_time(&[4.5]), 4.5);
        assert_eq!(round_time(&[3.0, 7.0, 5.0]), 7.0);
        assert_eq!(round_time(&[7.0, 5.0, 3.0]), 7.0);
    }

    #[test]
    fn ledger_csv_and_conservation() {
        let mut l = TrafficLedger::new(vec![vec![0.0; 2]; 2]);
        l.begin_round(1);
        l.record_send(0, 1, 64, 32);
        l.record_receive(0, 1, 64, 32);
        assert_eq!(l.conservation_violation(), None);
        l.record_receive(1, 0, 1, 0);
        assert_eq!(l.conservation_violation(), Some(1));
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,src,dst,embed_bits,model_bits\n1,0,1,64,32\n"
        );
    }
}
