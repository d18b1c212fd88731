use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::Serialize;

use super::{Category, Manifest, SizeClass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub category: Category,
    pub size: SizeClass,
    pub count: usize,
}

/// Mask counts per class, category and size, in class-table order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StatsReport {
    pub image_count: usize,
    pub mask_count: usize,
    pub per_class: IndexMap<String, ClassCount>,
    pub per_category: IndexMap<String, usize>,
    pub per_size: IndexMap<String, usize>,
}

pub fn dataset_stats(manifest: &Manifest) -> StatsReport {
    let table = &manifest.class_table;
    let mut counts = vec![0usize; table.len()];
    for inst in manifest.images.iter().flat_map(|i| i.instances()) {
        counts[inst.label.0] += 1;
    }

    let per_class: IndexMap<String, ClassCount> = table
        .entries()
        .iter()
        .zip(&counts)
        .map(|(e, &count)| {
            (
                e.name.clone(),
                ClassCount {
                    category: e.category,
                    size: e.size,
                    count,
                },
            )
        })
        .collect();

    let per_category = Category::ALL
        .iter()
        .map(|&c| {
            let n = per_class.values().filter(|v| v.category == c).map(|v| v.count).sum();
            (c.as_str().to_string(), n)
        })
        .collect();
    let per_size = SizeClass::ALL
        .iter()
        .map(|&s| {
            let n = per_class.values().filter(|v| v.size == s).map(|v| v.count).sum();
            (s.as_str().to_string(), n)
        })
        .collect();

    StatsReport {
        image_count: manifest.image_count(),
        mask_count: counts.iter().sum(),
        per_class,
        per_category,
        per_size,
    }
}

impl StatsReport {
    /// Fixed-width table grouped by category and size.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<8} {:<20} {:>8}", "Type", "Size", "Class", "Total");
        let _ = writeln!(out, "{}", "-".repeat(51));
        for cat in Category::ALL {
            for size in SizeClass::ALL.iter().rev() {
                for (name, c) in &self.per_class {
                    if c.category == cat && c.size == *size {
                        let _ = writeln!(
                            out,
                            "{:<12} {:<8} {:<20} {:>8}",
                            cat.as_str(),
                            size.as_str(),
                            name,
                            c.count
                        );
                    }
                }
            }
        }
        let _ = writeln!(out, "{}", "-".repeat(51));
        for (k, v) in &self.per_category {
            let _ = writeln!(out, "{:<42} {:>8}", format!("total {k}"), v);
        }
        for (k, v) in &self.per_size {
            let _ = writeln!(out, "{:<42} {:>8}", format!("total {k}"), v);
        }
        let _ = writeln!(out, "{:<42} {:>8}", "images", self.image_count);
        let _ = writeln!(out, "{:<42} {:>8}", "masks", self.mask_count);
        out
    }
}
