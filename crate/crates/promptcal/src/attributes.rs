//! Class-attribute catalogs and cosine-based attribute ranking.
//!
//! A catalog is a JSON document whose top level maps each class name to a
//! non-empty array of attribute phrases. Entry order is preserved.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::embed::{cosine_similarity, Encoder};
use crate::error::{Error, Result};

/// Ordered map from class name to its attribute phrases.
#[derive(Debug, Clone)]
pub struct AttributeCatalog {
    entries: Vec<(String, Vec<String>)>,
    index: HashMap<String, usize>,
}

struct CatalogEntries(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for CatalogEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = CatalogEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from class name to an array of attribute strings")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((class, attrs)) = map.next_entry::<String, Vec<String>>()? {
                    entries.push((class, attrs));
                }
                Ok(CatalogEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

fn has_control_chars(s: &str) -> bool {
    s.chars().any(|c| c.is_control())
}

impl AttributeCatalog {
    /// Validates and indexes entries. Rejects duplicate classes, empty names,
    /// empty attribute lists, empty attribute strings, and control characters.
    pub fn from_entries(entries: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (class, attrs)) in entries.iter().enumerate() {
            if class.trim().is_empty() {
                return Err(Error::Schema {
                    class: class.clone(),
                    reason: "class name is empty".into(),
                });
            }
            if has_control_chars(class) {
                return Err(Error::Schema {
                    class: class.clone(),
                    reason: "class name contains control characters".into(),
                });
            }
            if index.insert(class.clone(), i).is_some() {
                return Err(Error::Schema {
                    class: class.clone(),
                    reason: "duplicate class entry".into(),
                });
            }
            if attrs.is_empty() {
                return Err(Error::Schema {
                    class: class.clone(),
                    reason: "attribute list is empty".into(),
                });
            }
            for a in attrs {
                if a.trim().is_empty() {
                    return Err(Error::Schema {
                        class: class.clone(),
                        reason: "attribute string is empty".into(),
                    });
                }
                if has_control_chars(a) {
                    return Err(Error::Schema {
                        class: class.clone(),
                        reason: format!("attribute {a:?} contains control characters"),
                    });
                }
            }
        }
        Ok(Self { entries, index })
    }

    /// Parses a catalog from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        // serde_json keeps duplicate keys as separate map entries here, so
        // duplicates survive parsing and fail validation below.
        let entries: CatalogEntries =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_entries(entries.0)
    }

    /// Loads a catalog file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class names in file order.
    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(c, _)| c.as_str())
    }

    pub fn get(&self, class: &str) -> Option<&[String]> {
        self.index.get(class).map(|&i| self.entries[i].1.as_slice())
    }

    /// Attributes for a class, as an error when the class is absent.
    pub fn attributes_for(&self, class: &str) -> Result<&[String]> {
        self.get(class)
            .ok_or_else(|| Error::MissingClass(class.to_string()))
    }
}

/// Attributes of one class ordered by relevance to the class name.
#[derive(Debug, Clone)]
pub struct RankedAttributes {
    pub class_name: String,
    /// All attributes with their scores, best first.
    pub ranked: Vec<(String, f64)>,
    /// The top-M attribute texts, in rank order.
    pub selected: Vec<String>,
}

/// Scores each attribute by cosine between its text encoding and the class
/// name's text encoding, then keeps the best `top_m`.
///
/// Ties keep catalog order; `top_m` larger than the list keeps everything.
pub fn rank_attributes(
    class_name: &str,
    attributes: &[String],
    encoder: &Encoder,
    top_m: usize,
) -> Result<RankedAttributes> {
    if attributes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "class {class_name:?} has no attributes to rank"
        )));
    }
    if top_m == 0 {
        return Err(Error::InvalidArgument("top_m must be >= 1".into()));
    }
    let class_embed = encoder.encode_phrase(class_name)?;
    let mut ranked: Vec<(String, f64)> = attributes
        .iter()
        .map(|a| {
            let e = encoder.encode_phrase(a)?;
            Ok((a.clone(), cosine_similarity(&class_embed, &e)?))
        })
        .collect::<Result<_>>()?;
    // Stable sort: equal scores keep catalog order.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are finite"));
    let selected = ranked
        .iter()
        .take(top_m.min(ranked.len()))
        .map(|(a, _)| a.clone())
        .collect();
    Ok(RankedAttributes {
        class_name: class_name.to_string(),
        ranked,
        selected,
    })
}

/// Where attribute lists come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeSourceMode {
    /// Read from a loaded catalog; unknown classes are errors.
    OfflineCatalog,
    /// Deterministic fixture source standing in for a live generator.
    ClientStub,
}

/// Attribute provider with an offline catalog path and a stub client seam.
#[derive(Debug)]
pub struct AttributeSource {
    mode: AttributeSourceMode,
    catalog: Option<AttributeCatalog>,
    requests: Mutex<Vec<String>>,
}

impl AttributeSource {
    pub fn offline(catalog: AttributeCatalog) -> Self {
        Self {
            mode: AttributeSourceMode::OfflineCatalog,
            catalog: Some(catalog),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn stub() -> Self {
        Self {
            mode: AttributeSourceMode::ClientStub,
            catalog: None,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> AttributeSourceMode {
        self.mode
    }

    /// Fetches attributes for a class and records the request.
    pub fn fetch(&self, class_name: &str) -> Result<Vec<String>> {
        self.requests
            .lock()
            .expect("request log lock")
            .push(class_name.to_string());
        match self.mode {
            AttributeSourceMode::OfflineCatalog => Ok(self
                .catalog
                .as_ref()
                .expect("offline source has a catalog")
                .attributes_for(class_name)?
                .to_vec()),
            AttributeSourceMode::ClientStub => Ok(vec![
                format!("{class_name} outline"),
                format!("{class_name} texture"),
                format!("{class_name} coloring"),
            ]),
        }
    }

    /// Class names fetched so far, in request order.
    pub fn request_log(&self) -> Vec<String> {
        self.requests.lock().expect("request log lock").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EncoderConfig;

    fn encoder() -> Encoder {
        Encoder::new(EncoderConfig::default(), 42).unwrap()
    }

    #[test]
    fn catalog_preserves_order_and_content() {
        let cat = AttributeCatalog::from_json(
            r#"{"red panda": ["ringed tail", "russet fur"], "otter": ["webbed feet"]}"#,
        )
        .unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat.classes().collect::<Vec<_>>(), ["red panda", "otter"]);
        assert_eq!(
            cat.attributes_for("red panda").unwrap(),
            ["ringed tail", "russet fur"]
        );
        assert!(matches!(
            cat.attributes_for("walrus"),
            Err(Error::MissingClass(_))
        ));
    }

    #[test]
    fn catalog_rejects_duplicates_and_empty_lists() {
        let dup = AttributeCatalog::from_json(r#"{"a": ["x"], "a": ["y"]}"#);
        assert!(matches!(dup, Err(Error::Schema { class, .. }) if class == "a"));
        let empty = AttributeCatalog::from_json(r#"{"a": []}"#);
        assert!(matches!(empty, Err(Error::Schema { class, .. }) if class == "a"));
        let blank = AttributeCatalog::from_json(r#"{"a": ["  "]}"#);
        assert!(matches!(blank, Err(Error::Schema { .. })));
    }

    #[test]
    fn catalog_parse_failure_is_a_format_error_with_context() {
        let err = AttributeCatalog::from_json("{\"a\": [\"x\"],}").unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("line"), "no context in {msg:?}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn catalog_rejects_non_list_values() {
        let err = AttributeCatalog::from_json(r#"{"a": "not a list"}"#).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rank_puts_class_name_itself_first() {
        let enc = encoder();
        let attrs = vec!["zyx qwv".to_string(), "red panda".to_string()];
        let ranked = rank_attributes("red panda", &attrs, &enc, 1).unwrap();
        assert_eq!(ranked.selected, ["red panda"]);
        assert!((ranked.ranked[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rank_is_deterministic_and_caps_selection() {
        let enc = encoder();
        let attrs: Vec<String> = [
            "long whiskers",
            "sleek coat",
            "webbed feet",
            "river dweller",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let a = rank_attributes("otter", &attrs, &enc, 2).unwrap();
        let b = rank_attributes("otter", &attrs, &enc, 2).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.selected.len(), 2);
        let all = rank_attributes("otter", &attrs, &enc, 99).unwrap();
        assert_eq!(all.selected.len(), 4);
        for w in all.ranked.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn tied_scores_keep_catalog_order() {
        let enc = encoder();
        // Identical attribute text twice gives bit-equal scores.
        let attrs = vec!["same phrase".to_string(), "same phrase".to_string()];
        let ranked = rank_attributes("otter", &attrs, &enc, 2).unwrap();
        assert_eq!(ranked.ranked[0].0, "same phrase");
        assert_eq!(ranked.ranked[1].0, "same phrase");
        assert_eq!(ranked.ranked[0].1, ranked.ranked[1].1);
    }

    #[test]
    fn stub_source_is_deterministic_and_logs_requests() {
        let src = AttributeSource::stub();
        let a = src.fetch("lynx").unwrap();
        let b = src.fetch("lynx").unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert_eq!(src.request_log(), ["lynx", "lynx"]);
    }

    #[test]
    fn offline_source_reads_catalog_and_errors_on_unknown_class() {
        let cat = AttributeCatalog::from_json(r#"{"lynx": ["tufted ears"]}"#).unwrap();
        let src = AttributeSource::offline(cat);
        assert_eq!(src.fetch("lynx").unwrap(), ["tufted ears"]);
        assert!(matches!(src.fetch("yak"), Err(Error::MissingClass(_))));
        assert_eq!(src.request_log(), ["lynx", "yak"]);
    }
}
