//! Parameter-server shards and the shared cluster state.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimator::Checkpoint;
use crate::graph::{Collection, Graph};
use crate::optimizer::Optimizer;
use crate::tensor::Tensor;

use super::ClusterSpec;

/// Name of the scalar the leader stores in every checkpoint: the sum of all
/// other saved values, in file order.
pub const CHECKSUM_VARIABLE: &str = "parameter_checksum";

/// Round-robin shard index for each variable, by creation order.
pub fn assign_variables(names: &[String], num_ps: usize) -> Vec<usize> {
    (0..names.len()).map(|i| i % num_ps.max(1)).collect()
}

/// One parameter server: a set of variables, each behind its own lock.
/// Updates to one variable are atomic; there are no cross-variable
/// transactions.
#[derive(Default)]
pub struct PsShard {
    index: usize,
    vars: RwLock<BTreeMap<String, Arc<Mutex<Tensor>>>>,
}

impl PsShard {
    pub fn new(index: usize) -> Self {
        PsShard {
            index,
            vars: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn insert(&self, name: &str, value: Tensor) {
        self.vars
            .write()
            .expect("shard map poisoned")
            .insert(name.to_string(), Arc::new(Mutex::new(value)));
    }

    fn handle(&self, name: &str) -> Result<Arc<Mutex<Tensor>>> {
        self.vars
            .read()
            .expect("shard map poisoned")
            .get(name)
            .cloned()
            .ok_or_else(|| Error::VariableNotFound(format!("{name} (ps shard {})", self.index)))
    }

    pub fn read(&self, name: &str) -> Result<Tensor> {
        Ok(self
            .handle(name)?
            .lock()
            .expect("variable lock poisoned")
            .clone())
    }

    /// Runs `f` on the variable while holding its lock.
    pub fn update<T>(&self, name: &str, f: impl FnOnce(&mut Tensor) -> Result<T>) -> Result<T> {
        let h = self.handle(name)?;
        let mut guard = h.lock().expect("variable lock poisoned");
        f(&mut guard)
    }

    /// Applies an optimizer step, holding the variable's lock (and then its
    /// slot's) for the whole update.
    pub fn apply(
        &self,
        name: &str,
        slot: Option<&str>,
        grad: &Tensor,
        opt: &Optimizer,
    ) -> Result<()> {
        let h = self.handle(name)?;
        let mut var = h.lock().expect("variable lock poisoned");
        match slot {
            Some(s) => {
                let sh = self.handle(s)?;
                let mut acc = sh.lock().expect("slot lock poisoned");
                opt.apply(&mut var, grad, Some(&mut acc))
            }
            None => opt.apply(&mut var, grad, None),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.vars
            .read()
            .expect("shard map poisoned")
            .keys()
            .cloned()
            .collect()
    }
}

/// Shared state of one simulated cluster run: shards, placement, the global
/// step (owned by shard 0) and coordination flags.
pub struct Cluster {
    spec: ClusterSpec,
    shards: Vec<PsShard>,
    placement: RwLock<Vec<(String, usize)>>,
    global_step: AtomicU64,
    step_limit: AtomicU64,
    deadline: Mutex<Option<Instant>>,
    initialized: (Mutex<bool>, Condvar),
    shutdown: AtomicBool,
    training_done: AtomicBool,
    in_flight: AtomicUsize,
    active_workers: AtomicUsize,
}

impl Cluster {
    pub fn new(spec: ClusterSpec) -> Result<Arc<Cluster>> {
        spec.validate()?;
        Ok(Arc::new(Cluster {
            spec,
            shards: (0..spec.num_ps).map(PsShard::new).collect(),
            placement: RwLock::new(Vec::new()),
            global_step: AtomicU64::new(0),
            step_limit: AtomicU64::new(u64::MAX),
            deadline: Mutex::new(None),
            initialized: (Mutex::new(false), Condvar::new()),
            shutdown: AtomicBool::new(false),
            training_done: AtomicBool::new(false),
            in_flight: AtomicUsize::new(0),
            active_workers: AtomicUsize::new(spec.num_workers),
        }))
    }

    pub fn spec(&self) -> ClusterSpec {
        self.spec
    }

    pub fn shard(&self, index: usize) -> Result<&PsShard> {
        self.shards.get(index).ok_or_else(|| {
            Error::Config(format!(
                "ps index {index} out of range ({} shards)",
                self.shards.len()
            ))
        })
    }

    pub fn global_step(&self) -> u64 {
        self.global_step.load(Ordering::SeqCst)
    }

    pub fn set_step_limit(&self, limit: u64) {
        self.step_limit.store(limit, Ordering::SeqCst);
    }

    pub fn set_deadline(&self, deadline: Option<Instant>) {
        *self.deadline.lock().expect("deadline lock") = deadline;
    }

    /// Reserves the next global step for one batch, or `None` once the
    /// step limit or deadline is reached or shutdown was requested.
    pub fn claim_step(&self) -> Option<u64> {
        if self.is_shutdown() {
            return None;
        }
        if self
            .deadline
            .lock()
            .expect("deadline lock")
            .is_some_and(|d| Instant::now() >= d)
        {
            return None;
        }
        let limit = self.step_limit.load(Ordering::SeqCst);
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        let claimed = self
            .global_step
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |s| {
                (s < limit).then_some(s + 1)
            })
            .ok()
            .map(|prev| prev + 1);
        if claimed.is_none() {
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
        }
        claimed
    }

    /// Marks a claimed step's updates as applied (or abandoned).
    pub fn release_step(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::SeqCst)
    }

    pub fn worker_exited(&self) {
        self.active_workers.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn active_workers(&self) -> usize {
        self.active_workers.load(Ordering::SeqCst)
    }

    pub fn request_shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let (lock, cv) = &self.initialized;
        let _guard = lock.lock().expect("init lock");
        cv.notify_all();
    }

    pub fn is_shutdown(&self) -> bool {
        self.shutdown.load(Ordering::SeqCst)
    }

    pub fn mark_training_done(&self) {
        self.training_done.store(true, Ordering::SeqCst);
    }

    pub fn training_done(&self) -> bool {
        self.training_done.load(Ordering::SeqCst)
    }

    /// Leader only: places every persistent variable of `g` on the shards
    /// and publishes its value. Slots live with their primary variable.
    pub fn initialize_from(&self, g: &Graph) -> Result<()> {
        let mut primaries = Vec::new();
        let mut slots = Vec::new();
        for id in g.variables() {
            let def = g.var_def(id);
            match def.collection {
                Collection::Local | Collection::GlobalStep => {}
                Collection::Slot => slots.push(id),
                Collection::Model => primaries.push(id),
            }
        }
        let names: Vec<String> = primaries
            .iter()
            .map(|&v| g.var_def(v).name.clone())
            .collect();
        let mut placement: Vec<(String, usize)> = names
            .iter()
            .cloned()
            .zip(assign_variables(&names, self.shards.len()))
            .collect();
        for s in slots {
            let name = g.var_def(s).name.clone();
            let shard = placement
                .iter()
                .filter(|(p, _)| name.starts_with(&format!("{p}/")))
                .max_by_key(|(p, _)| p.len())
                .map(|(_, s)| *s)
                .unwrap_or(0);
            placement.push((name, shard));
        }
        for (name, shard) in &placement {
            let id = g.variable_by_name(name).expect("listed above");
            self.shards[*shard].insert(name, g.var_value(id).clone());
        }
        *self.placement.write().expect("placement lock") = placement;
        self.global_step
            .store(g.global_step_value(), Ordering::SeqCst);
        let (lock, cv) = &self.initialized;
        *lock.lock().expect("init lock") = true;
        cv.notify_all();
        Ok(())
    }

    /// Blocks until the leader has initialized the shards. Returns false on
    /// shutdown.
    pub fn wait_initialized(&self) -> bool {
        let (lock, cv) = &self.initialized;
        let mut ready = lock.lock().expect("init lock");
        while !*ready && !self.is_shutdown() {
            ready = cv.wait(ready).expect("init lock");
        }
        *ready
    }

    pub fn shard_of(&self, name: &str) -> Result<usize> {
        self.placement
            .read()
            .expect("placement lock")
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .ok_or_else(|| Error::VariableNotFound(format!("{name} (not placed on any ps)")))
    }

    pub fn placement(&self) -> Vec<(String, usize)> {
        self.placement.read().expect("placement lock").clone()
    }

    pub fn read(&self, name: &str) -> Result<Tensor> {
        self.shards[self.shard_of(name)?].read(name)
    }

    pub fn apply(
        &self,
        name: &str,
        slot: Option<&str>,
        grad: &Tensor,
        opt: &Optimizer,
    ) -> Result<()> {
        self.shards[self.shard_of(name)?].apply(name, slot, grad, opt)
    }

    /// Snapshot for the leader's checkpoint: each variable is read under its
    /// own lock, plus the checksum scalar.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let global_step = self.global_step();
        let mut variables = Vec::new();
        for (name, shard) in self.placement() {
            variables.push((name.clone(), self.shards[shard].read(&name)?));
        }
        let sum = checksum(&variables);
        variables.push((CHECKSUM_VARIABLE.to_string(), Tensor::scalar(sum)));
        Ok(Checkpoint {
            global_step,
            variables,
        })
    }
}

/// Sum of every value of every variable except the checksum itself.
pub fn checksum(vars: &[(String, Tensor)]) -> f64 {
    vars.iter()
        .filter(|(n, _)| n != CHECKSUM_VARIABLE)
        .flat_map(|(_, t)| t.data().iter().copied())
        .sum()
}

/// Recomputes the checksum of a loaded checkpoint.
pub fn verify_checksum(ckpt: &Checkpoint) -> Result<()> {
    let Some(stored) = ckpt.get(CHECKSUM_VARIABLE) else {
        return Ok(());
    };
    if stored.scalar_value()?.to_bits() != checksum(&ckpt.variables).to_bits() {
        return Err(Error::ChecksumMismatch {
            step: ckpt.global_step,
        });
    }
    Ok(())
}
