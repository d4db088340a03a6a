use std::collections::BTreeMap;

use onebyte_core::spsa::MachineKey;
use onebyte_core::wire::PeerEntry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub key: MachineKey,
    /// First iteration this member takes part in.
    pub start_iter: u64,
}

/// Known machines, keyed by address. Self is always present.
#[derive(Debug, Clone)]
pub struct PeerRegistry {
    me: String,
    members: BTreeMap<String, Member>,
}

impl PeerRegistry {
    pub fn new(me: MachineKey, start_iter: u64) -> Self {
        let addr = me.address.clone();
        let mut members = BTreeMap::new();
        members.insert(addr.clone(), Member { key: me, start_iter });
        Self { me: addr, members }
    }

    /// Adds or re-admits a peer. Returns false if it was already known with
    /// the same key and start.
    pub fn admit(&mut self, key: MachineKey, start_iter: u64) -> bool {
        if key.address == self.me {
            return false;
        }
        let member = Member { key, start_iter };
        let addr = member.key.address.clone();
        self.members.insert(addr, member.clone()) != Some(member)
    }

    pub fn remove(&mut self, address: &str) -> Option<Member> {
        if address == self.me {
            return None;
        }
        self.members.remove(address)
    }

    pub fn contains(&self, address: &str) -> bool {
        self.members.contains_key(address)
    }

    pub fn get(&self, address: &str) -> Option<&Member> {
        self.members.get(address)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_alone(&self) -> bool {
        self.members.len() == 1
    }

    /// Addresses of other members that take part in iteration `t`.
    pub fn active_others(&self, t: u64) -> Vec<String> {
        self.members
            .iter()
            .filter(|(a, m)| **a != self.me && m.start_iter <= t)
            .map(|(a, _)| a.clone())
            .collect()
    }

    /// Every other known address, including peers admitted for a later iteration.
    pub fn others(&self) -> Vec<String> {
        self.members.keys().filter(|a| **a != self.me).cloned().collect()
    }

    pub fn entries(&self) -> Vec<PeerEntry> {
        self.members
            .values()
            .map(|m| PeerEntry {
                machine_time: m.key.time,
                address: m.key.address.clone(),
            })
            .collect()
    }

    pub fn members(&self) -> impl Iterator<Item = &Member> {
        self.members.values()
    }
}
