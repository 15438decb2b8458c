// SPDX-License-Identifier: Apache-2.0

//! NT sequence tasks and their cycle structure.
//!
//! A task is fixed by a basis `N`, a delay `τ` and a variant. The next
//! symbol depends only on the last `τ + 1` symbols (the window):
//!
//! * `NT`:   `x(t) = x(t-τ) + x(t-τ-1)  (mod N)`
//! * `NT-S`: `x(t) = Σ_{i=1..τ+1} x(t-i)  (mod N)`
//! * `NT-R`: the `NT-S` rule when `x(t-τ-1) = 0`, the `NT` rule otherwise
//!
//! Windows are stored oldest first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Symbol = usize;

/// Largest state space [`enumerate_cycles`] will walk by default (2²⁸).
pub const DEFAULT_STATE_CAP: u64 = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Nt,
    Nts,
    Ntr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TaskSpec {
    basis: usize,
    delay: usize,
    variant: Variant,
}

impl TaskSpec {
    pub fn new(basis: usize, delay: usize, variant: Variant) -> Result<Self> {
        if basis < 2 || delay < 1 {
            return Err(Error::InvalidTaskSpec(format!(
                "basis {basis} / delay {delay} (need basis >= 2, delay >= 1)"
            )));
        }
        Ok(Self {
            basis,
            delay,
            variant,
        })
    }

    pub fn nt(basis: usize, delay: usize) -> Result<Self> {
        Self::new(basis, delay, Variant::Nt)
    }

    pub fn basis(&self) -> usize {
        self.basis
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Window length `τ + 1`.
    pub fn window(&self) -> usize {
        self.delay + 1
    }

    /// `N^(τ+1)`, saturating at `u128::MAX`.
    pub fn num_states(&self) -> u128 {
        (0..self.window()).fold(1u128, |acc, _| acc.saturating_mul(self.basis as u128))
    }

    /// Next symbol given the `τ + 1` most recent symbols, oldest first.
    /// Only the trailing window of `recent` is read.
    #[inline]
    pub fn next_from_window(&self, recent: &[Symbol]) -> Symbol {
        let w = &recent[recent.len() - self.window()..];
        let n = self.basis;
        let nt = || (w[0] + w[1]) % n;
        let nts = || w.iter().sum::<usize>() % n;
        match self.variant {
            Variant::Nt => nt(),
            Variant::Nts => nts(),
            Variant::Ntr => {
                if w[0] == 0 {
                    nts()
                } else {
                    nt()
                }
            }
        }
    }

    fn check_state(&self, state: &SequenceState) -> Result<()> {
        if state.window.len() != self.window() {
            return Err(Error::InvalidState(format!(
                "window length {} for {self} (expected {})",
                state.window.len(),
                self.window()
            )));
        }
        if let Some(&s) = state.window.iter().find(|&&s| s >= self.basis) {
            return Err(Error::InvalidSymbol {
                symbol: s,
                basis: self.basis,
            });
        }
        Ok(())
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}T{}", self.basis, self.delay)?;
        match self.variant {
            Variant::Nt => Ok(()),
            Variant::Nts => f.write_str("-S"),
            Variant::Ntr => f.write_str("-R"),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidTaskSpec(s.to_string());
        let (body, variant) = match s.split_once('-') {
            None => (s, Variant::Nt),
            Some((b, "S")) => (b, Variant::Nts),
            Some((b, "R")) => (b, Variant::Ntr),
            Some(_) => return Err(bad()),
        };
        let rest = body.strip_prefix('N').ok_or_else(bad)?;
        let (n, t) = rest.split_once('T').ok_or_else(bad)?;
        let basis = n.parse().map_err(|_| bad())?;
        let delay = t.parse().map_err(|_| bad())?;
        TaskSpec::new(basis, delay, variant)
    }
}

impl Serialize for TaskSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The last `τ + 1` symbols, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SequenceState {
    window: Vec<Symbol>,
}

impl SequenceState {
    pub fn new(spec: &TaskSpec, window: Vec<Symbol>) -> Result<Self> {
        let state = Self { window };
        spec.check_state(&state)?;
        Ok(state)
    }

    pub fn zeros(spec: &TaskSpec) -> Self {
        Self {
            window: vec![0; spec.window()],
        }
    }

    pub fn window(&self) -> &[Symbol] {
        &self.window
    }

    /// Mixed-radix index `Σ wᵢ Nⁱ`, oldest symbol as the least significant digit.
    pub fn encode(&self, basis: usize) -> u64 {
        self.window
            .iter()
            .rev()
            .fold(0u64, |acc, &s| acc * basis as u64 + s as u64)
    }

    pub fn decode(spec: &TaskSpec, mut index: u64) -> Self {
        let n = spec.basis as u64;
        let window = (0..spec.window())
            .map(|_| {
                let s = (index % n) as Symbol;
                index /= n;
                s
            })
            .collect();
        Self { window }
    }
}

pub fn next_symbol(spec: &TaskSpec, state: &SequenceState) -> Symbol {
    spec.next_from_window(&state.window)
}

/// Drops the oldest symbol and appends the next one.
pub fn advance(spec: &TaskSpec, state: &SequenceState) -> SequenceState {
    let next = next_symbol(spec, state);
    let mut window = Vec::with_capacity(state.window.len());
    window.extend_from_slice(&state.window[1..]);
    window.push(next);
    SequenceState { window }
}

/// The initial window followed by generated symbols, `length` symbols in total.
pub fn generate_series(spec: &TaskSpec, initial: &SequenceState, length: usize) -> Result<Vec<Symbol>> {
    spec.check_state(initial)?;
    if length < spec.window() {
        return Err(Error::SeriesTooShort {
            length,
            window: spec.window(),
        });
    }
    let mut series = Vec::with_capacity(length);
    series.extend_from_slice(&initial.window);
    while series.len() < length {
        let next = spec.next_from_window(&series);
        series.push(next);
    }
    Ok(series)
}

/// Uniform draw over all `N^(τ+1)` windows.
pub fn random_initial_state<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> SequenceState {
    SequenceState {
        window: (0..spec.window()).map(|_| rng.gen_range(0..spec.basis)).collect(),
    }
}

/// Cycle structure of the state map `advance`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleDecomposition {
    pub spec: TaskSpec,
    /// `(length, count)`, longest first.
    pub entries: Vec<(u64, u64)>,
    pub total_states: u64,
    /// States not lying on any cycle. Always zero for `NT` and `NT-S`.
    pub transient_states: u64,
}

impl CycleDecomposition {
    pub fn cycle_count(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c).sum()
    }

    pub fn cycle_states(&self) -> u64 {
        self.entries.iter().map(|&(l, c)| l * c).sum()
    }

    /// States on cycles divided by the number of cycles, i.e. the plain
    /// average of cycle lengths counted with multiplicity.
    pub fn mean_cycle_length(&self) -> f64 {
        let (num, den) = self.mean_cycle_length_ratio();
        num as f64 / den as f64
    }

    pub fn mean_cycle_length_ratio(&self) -> (u64, u64) {
        (self.cycle_states(), self.cycle_count())
    }
}

pub fn mean_cycle_length(dec: &CycleDecomposition) -> f64 {
    dec.mean_cycle_length()
}

#[derive(Serialize, Deserialize)]
struct CycleDecompositionJson {
    spec: TaskSpec,
    total: u64,
    cycles: Vec<[u64; 2]>,
    transients: u64,
}

impl Serialize for CycleDecomposition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CycleDecompositionJson {
            spec: self.spec,
            total: self.total_states,
            cycles: self.entries.iter().map(|&(l, c)| [l, c]).collect(),
            transients: self.transient_states,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CycleDecomposition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = CycleDecompositionJson::deserialize(d)?;
        Ok(Self {
            spec: raw.spec,
            entries: raw.cycles.into_iter().map(|[l, c]| (l, c)).collect(),
            total_states: raw.total,
            transient_states: raw.transients,
        })
    }
}

/// Steps integer-encoded states without allocating.
struct EncodedStepper {
    spec: TaskSpec,
    basis: u64,
    top: u64,
    digits: Vec<Symbol>,
}

impl EncodedStepper {
    fn new(spec: TaskSpec) -> Self {
        let basis = spec.basis as u64;
        Self {
            spec,
            basis,
            top: basis.pow(spec.delay as u32),
            digits: vec![0; spec.window()],
        }
    }

    #[inline]
    fn step(&mut self, index: u64) -> u64 {
        let mut rest = index;
        for d in self.digits.iter_mut() {
            *d = (rest % self.basis) as Symbol;
            rest /= self.basis;
        }
        let next = self.spec.next_from_window(&self.digits) as u64;
        index / self.basis + next * self.top
    }
}

struct BitSet(Vec<u64>);

impl BitSet {
    fn new(len: u64) -> Self {
        BitSet(vec![0; len.div_ceil(64) as usize])
    }

    #[inline]
    fn get(&self, i: u64) -> bool {
        self.0[(i >> 6) as usize] >> (i & 63) & 1 == 1
    }

    #[inline]
    fn set(&mut self, i: u64) {
        self.0[(i >> 6) as usize] |= 1 << (i & 63);
    }

    #[inline]
    fn clear(&mut self, i: u64) {
        self.0[(i >> 6) as usize] &= !(1 << (i & 63));
    }
}

/// Exhaustive cycle decomposition of the state map, refusing state spaces
/// larger than `state_cap`.
///
/// Every unvisited state is followed until it reaches either a state that
/// was finished earlier (the whole path is transient) or a state on the
/// current path (a new cycle; the prefix before it is transient).
pub fn enumerate_cycles(spec: &TaskSpec, state_cap: u64) -> Result<CycleDecomposition> {
    let states = spec.num_states();
    if states > state_cap as u128 {
        return Err(Error::StateSpaceTooLarge {
            states,
            cap: state_cap,
        });
    }
    let total = states as u64;
    let mut stepper = EncodedStepper::new(*spec);
    let mut done = BitSet::new(total);
    let mut on_path = BitSet::new(total);
    let mut path: Vec<u64> = Vec::new();
    let mut lengths: BTreeMap<u64, u64> = BTreeMap::new();
    let mut transients = 0u64;

    for start in 0..total {
        if done.get(start) {
            continue;
        }
        path.clear();
        let mut cur = start;
        loop {
            if done.get(cur) {
                transients += path.len() as u64;
                break;
            }
            if on_path.get(cur) {
                let mut len = 1u64;
                let mut probe = stepper.step(cur);
                while probe != cur {
                    probe = stepper.step(probe);
                    len += 1;
                }
                transients += path.len() as u64 - len;
                *lengths.entry(len).or_default() += 1;
                break;
            }
            on_path.set(cur);
            path.push(cur);
            cur = stepper.step(cur);
        }
        for &p in &path {
            on_path.clear(p);
            done.set(p);
        }
    }

    Ok(CycleDecomposition {
        spec: *spec,
        entries: lengths.into_iter().rev().collect(),
        total_states: total,
        transient_states: transients,
    })
}

pub fn one_hot_encode(symbol: Symbol, basis: usize) -> Result<Vec<f64>> {
    if symbol >= basis {
        return Err(Error::InvalidSymbol { symbol, basis });
    }
    let mut v = vec![0.0; basis];
    v[symbol] = 1.0;
    Ok(v)
}

/// Index of the largest component, lowest index on ties.
pub fn one_hot_decode(v: &[f64]) -> Symbol {
    argmax(v)
}

#[inline]
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
