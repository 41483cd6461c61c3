use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PredicateCategory {
    Attention,
    Spatial,
    Contacting,
}

impl PredicateCategory {
    pub const ALL: [PredicateCategory; 3] = [Self::Attention, Self::Spatial, Self::Contacting];
}

impl fmt::Display for PredicateCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Spatial => "spatial",
            Self::Contacting => "contacting",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predicate {
    pub name: String,
    /// Words used when the predicate is put into a sentence, e.g. "sitting on".
    pub surface_form: String,
    pub category: PredicateCategory,
}

const ENTITY_NAMES: [&str; 36] = [
    "person", "bag", "bed", "blanket", "book", "box", "broom", "chair", "closet", "clothes", "cup",
    "dish", "door", "doorknob", "doorway", "floor", "food", "groceries", "laptop", "light",
    "medicine", "mirror", "paper", "phone", "picture", "pillow", "refrigerator", "sandwich",
    "shelf", "shoe", "sofa", "table", "television", "towel", "vacuum", "window",
];

const ATTENTION: [&str; 3] = ["looking at", "not looking at", "unsure about"];
const SPATIAL: [&str; 6] = ["above", "beneath", "in front of", "behind", "on the side of", "in"];
const CONTACTING: [&str; 17] = [
    "carrying", "covered by", "drinking from", "eating", "having on the back", "holding",
    "leaning on", "lying on", "not contacting", "in another relationship with", "sitting on",
    "standing on", "touching", "twisting", "wearing", "wiping", "writing on",
];

/// Entity and predicate names. Entity class 0 is the person.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entity_classes: Vec<String>,
    predicates: Vec<Predicate>,
}

impl Vocabulary {
    pub fn new(entity_classes: Vec<String>, predicates: Vec<Predicate>) -> Result<Self> {
        let mut seen = HashSet::new();
        if entity_classes.is_empty() || predicates.is_empty() {
            return Err(Error::InvalidArgument("vocabulary needs entities and predicates".into()));
        }
        for n in &entity_classes {
            if n.trim().is_empty() || !seen.insert(n.clone()) {
                return Err(Error::InvalidArgument(format!("bad or duplicate entity name {n:?}")));
            }
        }
        let mut seen = HashSet::new();
        for p in &predicates {
            if p.surface_form.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("predicate {} has no surface form", p.name)));
            }
            if !seen.insert(p.name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate predicate {}", p.name)));
            }
        }
        Ok(Self {
            entity_classes,
            predicates,
        })
    }

    /// Default 36 entity / 26 predicate vocabulary (3 attention, 6 spatial,
    /// 17 contacting).
    pub fn default_desk() -> Self {
        Self::sized(36, [3, 6, 17]).expect("default sizes are valid")
    }

    /// Vocabulary with the given entity count and per-category predicate
    /// counts (attention, spatial, contacting). Known names are used first,
    /// then generated ones.
    pub fn sized(entity_count: usize, partition: [usize; 3]) -> Result<Self> {
        let entities = (0..entity_count)
            .map(|i| {
                ENTITY_NAMES
                    .get(i)
                    .map_or_else(|| format!("object{i}"), |s| s.to_string())
            })
            .collect();
        let mut predicates = Vec::new();
        let lists: [&[&str]; 3] = [&ATTENTION, &SPATIAL, &CONTACTING];
        for ((cat, list), &n) in PredicateCategory::ALL.iter().zip(lists).zip(&partition) {
            for i in 0..n {
                let surface = list
                    .get(i)
                    .map_or_else(|| format!("{cat} relation {i}"), |s| s.to_string());
                predicates.push(Predicate {
                    name: surface.replace(' ', "_"),
                    surface_form: surface,
                    category: *cat,
                });
            }
        }
        Self::new(entities, predicates)
    }

    pub fn entity_classes(&self) -> &[String] {
        &self.entity_classes
    }

    pub fn entity_name(&self, class: usize) -> &str {
        &self.entity_classes[class]
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn predicate(&self, id: usize) -> &Predicate {
        &self.predicates[id]
    }

    pub fn num_entities(&self) -> usize {
        self.entity_classes.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// Predicate ids grouped by category, skipping empty categories.
    pub fn category_groups(&self) -> Vec<(PredicateCategory, Vec<usize>)> {
        PredicateCategory::ALL
            .iter()
            .map(|&c| {
                let ids = (0..self.predicates.len())
                    .filter(|&i| self.predicates[i].category == c)
                    .collect::<Vec<_>>();
                (c, ids)
            })
            .filter(|(_, ids)| !ids.is_empty())
            .collect()
    }
}
