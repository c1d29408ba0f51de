//! Named parameter storage with per-group freeze flags.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four trainable model groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Generator,
    Discriminator,
    Decoder,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Generator, Group::Discriminator, Group::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Generator => "generator",
            Group::Discriminator => "discriminator",
            Group::Decoder => "decoder",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A small set of groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(0b1111);

    pub fn of(groups: &[Group]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, group: Group) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Group::name).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// Index of a parameter inside its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Map from dotted parameter name to tensor, with a trainable flag per group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    trainable: GroupSet,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new(), trainable: GroupSet::ALL }
    }

    pub fn register(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "register" });
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Like [`ParameterStore::id`] but an error names the missing parameter.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.require(name)?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set", format!("{name}: {:?} vs {:?}", slot.shape(), value.shape())));
        }
        *slot = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameter ids in canonical (name-sorted) order.
    pub fn sorted_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = (0..self.params.len()).map(ParamId).collect();
        ids.sort_by(|a, b| self.params[a.0].name.cmp(&self.params[b.0].name));
        ids
    }

    pub fn set_trainable(&mut self, group: Group, trainable: bool) {
        if trainable {
            self.trainable.0 |= group.bit();
        } else {
            self.trainable.0 &= !group.bit();
        }
    }

    /// Makes exactly `groups` trainable.
    pub fn set_trainable_groups(&mut self, groups: GroupSet) {
        self.trainable = groups;
    }

    pub fn trainable_groups(&self) -> GroupSet {
        self.trainable
    }

    pub fn is_trainable(&self, group: Group) -> bool {
        self.trainable.contains(group)
    }

    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// SHA-256 over the names, shapes and exact bit patterns of a group.
    pub fn group_digest(&self, group: Group) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for id in self.sorted_ids() {
            let p = &self.params[id.0];
            if p.group != group {
                continue;
            }
            hasher.update(p.name.as_bytes());
            for &e in p.value.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Xavier-uniform initialisation for a weight with the given fans.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let count = shape.iter().product();
    let data = (0..count).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
