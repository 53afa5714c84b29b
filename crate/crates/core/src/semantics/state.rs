use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir::{Label, Region, SecretContext, Value};

/// Number of scratch registers. Scalars are allocated to them round-robin in
/// declaration order; call arguments travel in the low registers and the
/// return value in `%r0`.
pub const SCRATCH_REGISTERS: usize = 8;

/// Sizes of the two memory regions, in cells. The unprotected region starts
/// at address 0 and holds the program stack; the protected region follows it
/// and holds the secrets and then the protected stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub unprotected: usize,
    pub protected: usize,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        MemoryLayout { unprotected: 2048, protected: 2048 }
    }
}

impl MemoryLayout {
    pub fn protected_base(&self) -> u64 {
        self.unprotected as u64
    }

    pub fn end(&self) -> u64 {
        (self.unprotected + self.protected) as u64
    }

    pub fn region_of(&self, address: u64) -> Option<Region> {
        if address < self.protected_base() {
            Some(Region::Unprotected)
        } else if address < self.end() {
            Some(Region::Protected)
        } else {
            None
        }
    }
}

/// Which stack new frames are allocated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackKind {
    Program,
    Protected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StackPointers {
    pub program: u64,
    pub protected: u64,
    pub active: StackKind,
}

/// Architectural state: memory, registers, stack pointers, domain and the
/// protection-key flag. Control state (the frame stack) lives in the
/// interpreter.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MachineState {
    pub layout: MemoryLayout,
    pub mem: Vec<Value>,
    /// Secret buffers: base address and length.
    pub secrets: BTreeMap<String, (u64, usize)>,
    pub registers: [Value; SCRATCH_REGISTERS],
    pub stacks: StackPointers,
    pub domain: Label,
    pub pkru_enabled: bool,
}

impl MachineState {
    pub fn new(layout: MemoryLayout, secrets: &SecretContext) -> Self {
        assert!(
            secrets.total_cells() < layout.protected,
            "secret context does not fit in the protected region"
        );
        let mut map = BTreeMap::new();
        let mut next = layout.protected_base();
        for (name, len) in secrets.iter() {
            map.insert(name.to_string(), (next, len));
            next += len as u64;
        }
        MachineState {
            layout,
            mem: vec![0; layout.unprotected + layout.protected],
            secrets: map,
            registers: [0; SCRATCH_REGISTERS],
            stacks: StackPointers { program: 0, protected: next, active: StackKind::Program },
            domain: Label::App,
            pkru_enabled: false,
        }
    }

    /// First address of the protected stack.
    pub fn protected_stack_base(&self) -> u64 {
        self.layout.protected_base()
            + self.secrets.values().map(|(_, len)| *len as u64).sum::<u64>()
    }

    pub fn secret_cells(&self, name: &str) -> Option<&[Value]> {
        let (base, len) = *self.secrets.get(name)?;
        Some(&self.mem[base as usize..base as usize + len])
    }

    pub fn unprotected(&self) -> &[Value] {
        &self.mem[..self.layout.unprotected]
    }

    /// Addresses at which two states' memories differ.
    pub fn diff(&self, other: &MachineState) -> Vec<u64> {
        self.mem
            .iter()
            .zip(&other.mem)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i as u64)
            .collect()
    }
}

/// Contents of a secret cell for a given seed. Seed 0 gives all-zero
/// secrets and seed 1 all-one bits; other seeds draw from a seeded stream.
pub fn secret_fill(seed: u64, cells: usize) -> Vec<Value> {
    match seed {
        0 => vec![0; cells],
        1 => vec![u64::MAX; cells],
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..cells).map(|_| rng.next_u64()).collect()
        }
    }
}

/// Initial states satisfying `secrets`, one per seed, in the default layout.
pub fn initial_states(secrets: &SecretContext, seeds: &[u64]) -> Vec<MachineState> {
    initial_states_with_layout(secrets, seeds, MemoryLayout::default())
}

pub fn initial_states_with_layout(
    secrets: &SecretContext,
    seeds: &[u64],
    layout: MemoryLayout,
) -> Vec<MachineState> {
    let template = MachineState::new(layout, secrets);
    seeds
        .iter()
        .map(|&seed| {
            let mut s = template.clone();
            let total = secrets.total_cells();
            let fill = secret_fill(seed, total);
            let base = layout.protected_base() as usize;
            s.mem[base..base + total].copy_from_slice(&fill);
            s
        })
        .collect()
}
