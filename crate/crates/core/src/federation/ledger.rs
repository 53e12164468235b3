use serde::{Deserialize, Serialize};

use crate::router::ExpertSet;
use crate::tensor::StaticKeySet;

/// Server → client messages.
#[derive(Clone, Debug)]
pub enum Downlink {
    Keys(StaticKeySet),
    Experts(ExpertSet),
}

impl Downlink {
    pub fn params(&self) -> usize {
        match self {
            Downlink::Keys(k) => k.param_count(),
            Downlink::Experts(e) => e.param_count(),
        }
    }
}

/// Client → server messages. Expert parameters are the only payload a client can send.
#[derive(Clone, Debug)]
pub enum Uplink {
    Experts {
        client: usize,
        samples: usize,
        experts: ExpertSet,
    },
}

impl Uplink {
    pub fn params(&self) -> usize {
        match self {
            Uplink::Experts { experts, .. } => experts.param_count(),
        }
    }
}

/// Logical parameter counts exchanged in one round, summed over clients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub uplink_params: usize,
    /// Experts plus, in the first round only, the keys.
    pub downlink_params: usize,
    pub key_params: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub records: Vec<CommRecord>,
}

impl RoundLedger {
    pub fn begin_round(&mut self, round: usize) {
        self.records.push(CommRecord {
            round,
            ..CommRecord::default()
        });
    }

    fn current(&mut self) -> &mut CommRecord {
        self.records.last_mut().expect("begin_round called first")
    }

    pub fn record_downlink(&mut self, msg: &Downlink, receivers: usize) {
        let n = msg.params() * receivers;
        let rec = self.current();
        rec.downlink_params += n;
        if let Downlink::Keys(_) = msg {
            rec.key_params += n;
        }
    }

    pub fn record_uplink(&mut self, msg: &Uplink) {
        let n = msg.params();
        self.current().uplink_params += n;
    }

    /// Rounds in which keys were sent.
    pub fn key_rounds(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.key_params > 0).map(|r| r.round).collect()
    }
}
