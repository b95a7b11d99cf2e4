//! The collaborative knowledge graph: users, items and knowledge-graph
//! entities in one entity space, with interactions stored as relations.
//!
//! Entity layout: KG entities occupy `0..n_entities` (items are aligned into
//! this range), users occupy `n_entities..n_entities + n_users`.
//! Relation layout: `0` is user→item "interact", `1` its inverse, then each
//! input KG relation `r` becomes `2 + r` with inverse `2 + n_kg_relations + r`.

mod io;

pub use io::Dataset;

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UserId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub usize);

pub const INTERACT: RelationId = RelationId(0);
pub const INTERACTED_BY: RelationId = RelationId(1);

/// `(head, relation, tail)`, ordered by that tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

/// Item → KG entity alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    item_entity: Vec<EntityId>,
}

impl Alignment {
    pub fn identity(n_items: usize) -> Self {
        Self {
            item_entity: (0..n_items).map(EntityId).collect(),
        }
    }

    /// Panics if two items map to the same entity.
    pub fn new(item_entity: Vec<EntityId>) -> Self {
        let distinct: HashSet<_> = item_entity.iter().collect();
        assert_eq!(distinct.len(), item_entity.len(), "alignment must be injective");
        Self { item_entity }
    }

    pub fn n_items(&self) -> usize {
        self.item_entity.len()
    }

    pub fn entity(&self, item: ItemId) -> Option<EntityId> {
        self.item_entity.get(item.0).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ItemId, EntityId)> + '_ {
        self.item_entity.iter().enumerate().map(|(i, &e)| (ItemId(i), e))
    }
}

/// Sizes of the input id spaces. Fixing them up front keeps ids stable across
/// graphs built from different subsets of the same data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphSizes {
    pub n_users: usize,
    pub n_entities: usize,
    pub n_kg_relations: usize,
}

impl GraphSizes {
    pub fn infer(interactions: &[(UserId, ItemId)], kg: &[Triple], alignment: &Alignment) -> Self {
        let n_users = interactions.iter().map(|(u, _)| u.0 + 1).max().unwrap_or(0);
        let n_entities = kg
            .iter()
            .map(|t| t.head.0.max(t.tail.0) + 1)
            .chain(alignment.pairs().map(|(_, e)| e.0 + 1))
            .max()
            .unwrap_or(0);
        let n_kg_relations = kg.iter().map(|t| t.relation.0 + 1).max().unwrap_or(0);
        Self {
            n_users,
            n_entities,
            n_kg_relations,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CollabKG {
    sizes: GraphSizes,
    alignment: Alignment,
    entity_item: HashMap<EntityId, ItemId>,
    triples: Vec<Triple>,
    /// `head_start[h]..head_start[h + 1]` are the triples of head `h`; the
    /// collaborative ones come first and end at `collab_end[h]`.
    head_start: Vec<usize>,
    collab_end: Vec<usize>,
    user_items: Vec<Vec<ItemId>>,
    triple_set: HashSet<Triple>,
}

impl CollabKG {
    /// Builds the graph with id spaces inferred from the inputs.
    pub fn build(
        interactions: &[(UserId, ItemId)],
        kg_triples: &[Triple],
        alignment: &Alignment,
    ) -> Result<Self> {
        let sizes = GraphSizes::infer(interactions, kg_triples, alignment);
        Self::build_sized(sizes, interactions, kg_triples, alignment)
    }

    /// Builds the graph over fixed id spaces. Duplicate interactions and
    /// duplicate KG triples collapse to one edge.
    pub fn build_sized(
        sizes: GraphSizes,
        interactions: &[(UserId, ItemId)],
        kg_triples: &[Triple],
        alignment: &Alignment,
    ) -> Result<Self> {
        let n_total = sizes.n_entities + sizes.n_users;
        for (_, e) in alignment.pairs() {
            if e.0 >= sizes.n_entities {
                return Err(Error::IndexOutOfRange {
                    what: "aligned entity",
                    index: e.0,
                    size: sizes.n_entities,
                });
            }
        }
        let mut triples = Vec::with_capacity(2 * (interactions.len() + kg_triples.len()));
        let mut user_items: Vec<Vec<ItemId>> = vec![Vec::new(); sizes.n_users];
        for &(u, i) in interactions {
            if u.0 >= sizes.n_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: u.0,
                    size: sizes.n_users,
                });
            }
            let e = alignment.entity(i).ok_or(Error::DanglingItem(i.0))?;
            let ue = EntityId(sizes.n_entities + u.0);
            triples.push(Triple {
                head: ue,
                relation: INTERACT,
                tail: e,
            });
            triples.push(Triple {
                head: e,
                relation: INTERACTED_BY,
                tail: ue,
            });
            user_items[u.0].push(i);
        }
        for t in kg_triples {
            for (what, idx, size) in [
                ("entity", t.head.0, sizes.n_entities),
                ("entity", t.tail.0, sizes.n_entities),
                ("relation", t.relation.0, sizes.n_kg_relations),
            ] {
                if idx >= size {
                    return Err(Error::IndexOutOfRange {
                        what,
                        index: idx,
                        size,
                    });
                }
            }
            triples.push(Triple {
                head: t.head,
                relation: RelationId(2 + t.relation.0),
                tail: t.tail,
            });
            triples.push(Triple {
                head: t.tail,
                relation: RelationId(2 + sizes.n_kg_relations + t.relation.0),
                tail: t.head,
            });
        }
        triples.sort_unstable();
        triples.dedup();
        for items in &mut user_items {
            items.sort_unstable();
            items.dedup();
        }

        let mut head_start = vec![0; n_total + 1];
        for t in &triples {
            head_start[t.head.0 + 1] += 1;
        }
        for h in 0..n_total {
            head_start[h + 1] += head_start[h];
        }
        let collab_end = (0..n_total)
            .map(|h| {
                let (s, e) = (head_start[h], head_start[h + 1]);
                s + triples[s..e].iter().filter(|t| is_interaction(t.relation)).count()
            })
            .collect();
        let entity_item = alignment.pairs().map(|(i, e)| (e, i)).collect();
        let triple_set = triples.iter().copied().collect();

        Ok(Self {
            sizes,
            alignment: alignment.clone(),
            entity_item,
            triples,
            head_start,
            collab_end,
            user_items,
            triple_set,
        })
    }

    /// A copy of this graph with the given interactions removed (both
    /// directions). Id spaces are unchanged.
    pub fn without_interactions(&self, removed: &[(UserId, ItemId)]) -> Result<Self> {
        let removed: HashSet<_> = removed.iter().copied().collect();
        let interactions: Vec<_> = self
            .interactions()
            .filter(|p| !removed.contains(p))
            .collect();
        Self::build_sized(self.sizes, &interactions, &self.kg_input_triples(), &self.alignment)
    }

    /// A copy of this graph with extra interactions and KG triples added.
    pub fn with_additions(&self, interactions: &[(UserId, ItemId)], kg: &[Triple]) -> Result<Self> {
        let mut all: Vec<_> = self.interactions().collect();
        all.extend_from_slice(interactions);
        let mut kg_all = self.kg_input_triples();
        kg_all.extend_from_slice(kg);
        Self::build_sized(self.sizes, &all, &kg_all, &self.alignment)
    }

    pub fn sizes(&self) -> GraphSizes {
        self.sizes
    }

    pub fn alignment(&self) -> &Alignment {
        &self.alignment
    }

    pub fn n_users(&self) -> usize {
        self.sizes.n_users
    }

    pub fn n_items(&self) -> usize {
        self.alignment.n_items()
    }

    /// `|ℰ| + |𝒰|`.
    pub fn n_total_entities(&self) -> usize {
        self.sizes.n_entities + self.sizes.n_users
    }

    /// Interaction relation pair plus both directions of every KG relation.
    pub fn n_relations(&self) -> usize {
        2 + 2 * self.sizes.n_kg_relations
    }

    pub fn user_entity(&self, u: UserId) -> EntityId {
        EntityId(self.sizes.n_entities + u.0)
    }

    pub fn item_entity(&self, i: ItemId) -> EntityId {
        self.alignment.entity(i).expect("item in range")
    }

    pub fn entity_item(&self, e: EntityId) -> Option<ItemId> {
        self.entity_item.get(&e).copied()
    }

    pub fn is_user(&self, e: EntityId) -> bool {
        e.0 >= self.sizes.n_entities
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        let k = self.sizes.n_kg_relations;
        match r.0 {
            0 => INTERACTED_BY,
            1 => INTERACT,
            x if x < 2 + k => RelationId(x + k),
            x => RelationId(x - k),
        }
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    pub fn out_triples(&self, h: EntityId) -> &[Triple] {
        &self.triples[self.head_start[h.0]..self.head_start[h.0 + 1]]
    }

    /// `𝒩ₕᶜ`: outgoing interaction edges of `h` (item→user, or user→item).
    pub fn collab_neighbors(&self, h: EntityId) -> &[Triple] {
        &self.triples[self.head_start[h.0]..self.collab_end[h.0]]
    }

    /// `𝒩ₕᵏ`: outgoing knowledge edges of `h`.
    pub fn knowledge_neighbors(&self, h: EntityId) -> &[Triple] {
        &self.triples[self.collab_end[h.0]..self.head_start[h.0 + 1]]
    }

    /// Whether triple `t` belongs to the collaborative branch.
    pub fn is_collaborative(t: &Triple) -> bool {
        is_interaction(t.relation)
    }

    pub fn positives(&self, u: UserId) -> &[ItemId] {
        &self.user_items[u.0]
    }

    pub fn has_interaction(&self, u: UserId, i: ItemId) -> bool {
        self.user_items[u.0].binary_search(&i).is_ok()
    }

    /// Every `(user, item)` interaction, ordered by user then item.
    pub fn interactions(&self) -> impl Iterator<Item = (UserId, ItemId)> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (UserId(u), i)))
    }

    /// Canonical-direction KG triples in input relation ids.
    pub fn kg_input_triples(&self) -> Vec<Triple> {
        let k = self.sizes.n_kg_relations;
        self.triples
            .iter()
            .filter(|t| t.relation.0 >= 2 && t.relation.0 < 2 + k)
            .map(|t| Triple {
                head: t.head,
                relation: RelationId(t.relation.0 - 2),
                tail: t.tail,
            })
            .collect()
    }

    /// Knowledge triples (both directions) in graph relation ids.
    pub fn knowledge_triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(|t| !is_interaction(t.relation))
    }

    /// Uniform negatives for `user` from items it has not interacted with.
    /// Items are distinct while enough candidates exist; beyond that the
    /// sample wraps around the shuffled candidate list.
    pub fn sample_cf_negatives<R: Rng + ?Sized>(
        &self,
        user: UserId,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<ItemId>> {
        self.sample_cf_negatives_excluding(user, count, &[], rng)
    }

    /// As [`CollabKG::sample_cf_negatives`], also excluding `extra` items.
    pub fn sample_cf_negatives_excluding<R: Rng + ?Sized>(
        &self,
        user: UserId,
        count: usize,
        extra: &[ItemId],
        rng: &mut R,
    ) -> Result<Vec<ItemId>> {
        let n_items = self.n_items();
        let positives = &self.user_items[user.0];
        let blocked = |i: ItemId| positives.binary_search(&i).is_ok() || extra.contains(&i);
        let available = n_items.saturating_sub(positives.len() + extra.len());
        if count == 0 {
            return Ok(Vec::new());
        }
        // rejection sampling while the complement is large
        if available > 0 && count * 4 <= available && positives.len() + extra.len() <= n_items / 2 {
            let mut picked = Vec::with_capacity(count);
            let mut seen = HashSet::with_capacity(count);
            while picked.len() < count {
                let i = ItemId(rng.random_range(0..n_items));
                if !blocked(i) && seen.insert(i) {
                    picked.push(i);
                }
            }
            return Ok(picked);
        }
        let mut complement: Vec<ItemId> = (0..n_items).map(ItemId).filter(|&i| !blocked(i)).collect();
        if complement.is_empty() {
            return Err(Error::Exhausted(format!(
                "user {} has interacted with every item",
                user.0
            )));
        }
        complement.shuffle(rng);
        Ok((0..count).map(|k| complement[k % complement.len()]).collect())
    }

    /// Corrupts the tail of `triple` so that the result is not in the graph.
    pub fn sample_kg_negative<R: Rng + ?Sized>(&self, triple: &Triple, rng: &mut R) -> Result<Triple> {
        let n = self.n_total_entities();
        let corrupt = |t: usize| Triple {
            head: triple.head,
            relation: triple.relation,
            tail: EntityId(t),
        };
        for _ in 0..64 {
            let c = corrupt(rng.random_range(0..n));
            if !self.contains(&c) {
                return Ok(c);
            }
        }
        let options: Vec<usize> = (0..n).filter(|&t| !self.contains(&corrupt(t))).collect();
        if options.is_empty() {
            return Err(Error::Exhausted(format!(
                "no corrupting tail for ({}, {}, {})",
                triple.head.0, triple.relation.0, triple.tail.0
            )));
        }
        Ok(corrupt(options[rng.random_range(0..options.len())]))
    }
}

fn is_interaction(r: RelationId) -> bool {
    r == INTERACT || r == INTERACTED_BY
}
