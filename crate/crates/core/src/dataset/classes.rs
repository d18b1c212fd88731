use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`ClassTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId(pub usize);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Pickupable,
    Receptacle,
    Openable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Pickupable, Category::Receptacle, Category::Openable];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Pickupable => "pickupable",
            Category::Receptacle => "receptacle",
            Category::Openable => "openable",
        }
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub category: Category,
    pub size: SizeClass,
}

impl ClassEntry {
    pub fn new(name: impl Into<String>, category: Category, size: SizeClass) -> Self {
        Self {
            name: name.into(),
            category,
            size,
        }
    }
}

/// Ordered list of object classes with unique names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
    by_name: HashMap<String, ClassId>,
}

impl ClassTable {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_name.insert(e.name.clone(), ClassId(i)).is_some() {
                return Err(Error::invalid(format!("duplicate class name `{}`", e.name)));
            }
        }
        Ok(Self { entries, by_name })
    }

    /// The 54 interactable indoor object classes, grouped as in the
    /// reference dataset statistics.
    pub fn indoor54() -> Self {
        use Category::*;
        use SizeClass::*;
        let groups: [(Category, SizeClass, &[&str]); 6] = [
            (
                Receptacle,
                Large,
                &["CounterTop", "DiningTable", "Sofa", "Bed", "Bathtub", "Desk", "BathtubBasin", "TVStand"],
            ),
            (
                Receptacle,
                Medium,
                &["Shelf", "Sink", "GarbageCan", "SideTable", "SinkBasin", "ArmChair", "CoffeeTable", "Ottoman"],
            ),
            (Receptacle, Small, &["StoveBurner", "ToiletPaperHanger"]),
            (
                Openable,
                Large,
                &["Fridge", "Dresser", "Blinds", "ShowerDoor", "ShowerCurtain"],
            ),
            (
                Openable,
                Medium,
                &["Cabinet", "Drawer", "Toilet", "Microwave", "Safe", "LaundryHamper"],
            ),
            (
                Pickupable,
                Medium,
                &["Statue", "Laptop", "Pan", "Pot", "Vase", "TissueBox", "BaseballBat", "WateringCan"],
            ),
        ];
        let small_pickupable = [
            "SoapBottle", "ToiletPaper", "Bowl", "Mug", "Box", "Plate", "Plunger", "SprayBottle",
            "ScrubBrush", "Book", "DishSponge", "Cup", "SoapBar", "AlarmClock", "Newspaper",
            "PaperTowelRoll", "BasketBall",
        ];
        let mut entries = Vec::with_capacity(54);
        for (cat, size, names) in groups {
            entries.extend(names.iter().map(|n| ClassEntry::new(*n, cat, size)));
        }
        entries.extend(
            small_pickupable
                .iter()
                .map(|n| ClassEntry::new(*n, Pickupable, Small)),
        );
        Self::new(entries).expect("built-in table has unique names")
    }

    /// First `n` entries of a fixed eight-class subset, used by the
    /// synthetic generator.
    pub fn toy(n: usize) -> Result<Self> {
        use Category::*;
        use SizeClass::*;
        let all = [
            ClassEntry::new("Mug", Pickupable, Small),
            ClassEntry::new("Laptop", Pickupable, Medium),
            ClassEntry::new("Sofa", Receptacle, Large),
            ClassEntry::new("GarbageCan", Receptacle, Medium),
            ClassEntry::new("Fridge", Openable, Large),
            ClassEntry::new("Microwave", Openable, Medium),
            ClassEntry::new("Plate", Pickupable, Small),
            ClassEntry::new("Bed", Receptacle, Large),
        ];
        if n == 0 || n > all.len() {
            return Err(Error::arg(format!(
                "toy class table supports 1..={} classes, got {n}",
                all.len()
            )));
        }
        Self::new(all[..n].to_vec())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(id.0)
    }

    pub fn name(&self, id: ClassId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ClassId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        (0..self.entries.len()).map(ClassId)
    }
}

impl Serialize for ClassTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<ClassEntry>::deserialize(d)?;
        ClassTable::new(entries).map_err(serde::de::Error::custom)
    }
}
