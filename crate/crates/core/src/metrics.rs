//! Communication ledger, total-cost model and per-run records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact CSV header of a run record.
pub const CSV_HEADER: &str =
    "t,comm_rounds,uplink_bits,downlink_bits,local_steps,total_cost,train_loss,test_loss,test_accuracy";

/// `comm_rounds + tau * local_steps`: a communication round costs 1, a local
/// training step costs `tau`.
pub fn total_cost(comm_rounds: u64, local_steps: u64, tau: f64) -> f64 {
    comm_rounds as f64 + local_steps as f64 * tau
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitLedger {
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub comm_rounds: u64,
    pub local_steps: u64,
}

impl BitLedger {
    /// Charges one communication round.
    pub fn charge_round(&mut self, uplink_bits: u64, downlink_bits: u64) {
        self.comm_rounds += 1;
        self.uplink_bits += uplink_bits;
        self.downlink_bits += downlink_bits;
    }

    pub fn add_local_steps(&mut self, steps: u64) {
        self.local_steps += steps;
    }

    pub fn total_cost(&self, tau: f64) -> f64 {
        total_cost(self.comm_rounds, self.local_steps, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub t: u64,
    pub comm_rounds: u64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub local_steps: u64,
    pub total_cost: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub train_loss: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub seed: u64,
    pub comm_rounds: u64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub local_steps: u64,
    /// Largest `max_j |sum_i h_ij|` seen over the run (control-variate
    /// algorithms only).
    pub control_variate_drift: Option<f64>,
}

/// Rows of one run plus the echoed configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord<C: Serialize> {
    pub config: C,
    pub tau: f64,
    pub rows: Vec<EvalRow>,
}

impl<C: Serialize> RunRecord<C> {
    pub fn new(config: C, tau: f64) -> Self {
        RunRecord {
            config,
            tau,
            rows: Vec::new(),
        }
    }

    /// Appends a row snapshotting `ledger` at iteration `t`. Iterations must
    /// be strictly increasing.
    pub fn record_eval(
        &mut self,
        ledger: &BitLedger,
        losses: Losses,
        accuracy: f64,
        t: u64,
    ) -> Result<&EvalRow> {
        if let Some(last) = self.rows.last() {
            if t <= last.t {
                return Err(Error::Protocol(format!(
                    "evaluation at t={t} after t={}",
                    last.t
                )));
            }
        }
        self.rows.push(EvalRow {
            t,
            comm_rounds: ledger.comm_rounds,
            uplink_bits: ledger.uplink_bits,
            downlink_bits: ledger.downlink_bits,
            local_steps: ledger.local_steps,
            total_cost: ledger.total_cost(self.tau),
            train_loss: losses.train_loss,
            test_loss: losses.test_loss,
            test_accuracy: accuracy,
        });
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn best_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.test_accuracy).fold(f64::NAN, f64::max)
    }

    pub fn last(&self) -> Option<&EvalRow> {
        self.rows.last()
    }

    pub fn summary(&self, seed: u64, control_variate_drift: Option<f64>) -> Summary {
        let last = self.rows.last().copied();
        Summary {
            best_accuracy: self.best_accuracy(),
            final_accuracy: last.map_or(f64::NAN, |r| r.test_accuracy),
            final_loss: last.map_or(f64::NAN, |r| r.train_loss),
            seed,
            comm_rounds: last.map_or(0, |r| r.comm_rounds),
            uplink_bits: last.map_or(0, |r| r.uplink_bits),
            downlink_bits: last.map_or(0, |r| r.downlink_bits),
            local_steps: last.map_or(0, |r| r.local_steps),
            control_variate_drift,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(','))?;
        }
        w.flush().map_err(|e| Error::io("<run csv>", e))?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W, summary: &Summary) -> Result<()> {
        #[derive(Serialize)]
        struct Doc<'a, C: Serialize> {
            config: &'a C,
            tau: f64,
            summary: &'a Summary,
        }
        serde_json::to_writer_pretty(
            out,
            &Doc {
                config: &self.config,
                tau: self.tau,
                summary,
            },
        )?;
        Ok(())
    }
}
