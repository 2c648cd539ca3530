//! File formats: VOC XML annotations, detection and proposal lists,
//! refinement traces, and the run configuration.
//!
//! Coordinates in every format except VOC XML are continuous 0-based pixel
//! coordinates. VOC's 1-based inclusive pixel indices are converted at the
//! XML boundary: `<xmin>` maps to `xmin - 1`, `<xmax>` stays `xmax`.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::ApMode;
use crate::geometry::{CornerBox, ImageExtent};
use crate::model::TrainConfig;
use crate::refine::{DetectionState, RefinementConfig};
use crate::synthdata::SynthConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub name: String,
    pub corners: CornerBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub extent: ImageExtent,
    pub objects: Vec<AnnotatedObject>,
}

fn xml_error(e: roxmltree::Error) -> Error {
    let pos = e.pos();
    Error::Xml {
        line: pos.row,
        column: pos.col,
        message: e.to_string(),
    }
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn required_text<'a>(node: roxmltree::Node<'a, '_>, path: &str) -> Result<&'a str> {
    let mut cur = node;
    for part in path.split('/') {
        cur = child(cur, part).ok_or_else(|| Error::Schema(path.to_string()))?;
    }
    Ok(cur.text().map(str::trim).unwrap_or(""))
}

fn required_number(node: roxmltree::Node<'_, '_>, path: &str) -> Result<f64> {
    let text = required_text(node, path)?;
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Schema(format!("{path}: invalid number `{text}`")))
}

/// Parses a devkit-style `<annotation>` document. The image id is the
/// `<filename>` without its extension.
pub fn parse_voc_xml(text: &str) -> Result<AnnotationRecord> {
    let doc = roxmltree::Document::parse(text).map_err(xml_error)?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Schema("annotation".into()));
    }
    let filename = required_text(root, "filename")?;
    let image_id = filename.rsplit_once('.').map_or(filename, |(stem, _)| stem).to_string();
    if image_id.is_empty() {
        return Err(Error::Schema("filename".into()));
    }
    let extent = ImageExtent::new(
        required_number(root, "size/width")?,
        required_number(root, "size/height")?,
    )
    .map_err(|_| Error::Schema("size".into()))?;

    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = required_text(obj, "name")?;
        if name.is_empty() {
            return Err(Error::Schema("object/name".into()));
        }
        let xmin = required_number(obj, "bndbox/xmin")?;
        let ymin = required_number(obj, "bndbox/ymin")?;
        let xmax = required_number(obj, "bndbox/xmax")?;
        let ymax = required_number(obj, "bndbox/ymax")?;
        let corners = CornerBox {
            xmin: xmin - 1.0,
            ymin: ymin - 1.0,
            xmax,
            ymax,
        };
        if corners.xmin >= corners.xmax || corners.ymin >= corners.ymax {
            return Err(Error::DegenerateBox(format!(
                "object `{name}` has corners ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        let difficult = match child(obj, "difficult").and_then(|d| d.text()).map(str::trim) {
            None | Some("0") | Some("") => false,
            Some("1") => true,
            Some(other) => return Err(Error::Schema(format!("object/difficult: invalid flag `{other}`"))),
        };
        objects.push(AnnotatedObject {
            name: name.to_string(),
            corners,
            difficult,
        });
    }
    Ok(AnnotationRecord {
        image_id,
        extent,
        objects,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Inverse of [`parse_voc_xml`]; coordinates are written back in VOC's
/// 1-based convention at full precision.
pub fn write_voc_xml(record: &AnnotationRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "<annotation>");
    let _ = writeln!(out, "\t<filename>{}.jpg</filename>", escape(&record.image_id));
    let _ = writeln!(out, "\t<size>");
    let _ = writeln!(out, "\t\t<width>{}</width>", record.extent.width());
    let _ = writeln!(out, "\t\t<height>{}</height>", record.extent.height());
    let _ = writeln!(out, "\t\t<depth>3</depth>");
    let _ = writeln!(out, "\t</size>");
    for o in &record.objects {
        let c = &o.corners;
        let _ = writeln!(out, "\t<object>");
        let _ = writeln!(out, "\t\t<name>{}</name>", escape(&o.name));
        let _ = writeln!(out, "\t\t<difficult>{}</difficult>", u8::from(o.difficult));
        let _ = writeln!(out, "\t\t<bndbox>");
        let _ = writeln!(out, "\t\t\t<xmin>{}</xmin>", c.xmin + 1.0);
        let _ = writeln!(out, "\t\t\t<ymin>{}</ymin>", c.ymin + 1.0);
        let _ = writeln!(out, "\t\t\t<xmax>{}</xmax>", c.xmax);
        let _ = writeln!(out, "\t\t\t<ymax>{}</ymax>", c.ymax);
        let _ = writeln!(out, "\t\t</bndbox>");
        let _ = writeln!(out, "\t</object>");
    }
    let _ = writeln!(out, "</annotation>");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_name: String,
    pub score: f64,
    pub corners: CornerBox,
}

/// One `image_id class score xmin ymin xmax ymax` line per record.
pub fn write_detections(records: &[DetectionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let c = &r.corners;
        let _ = writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.image_id, r.class_name, r.score, c.xmin, c.ymin, c.xmax, c.ymax
        );
    }
    out
}

/// Per-class files in the devkit's `comp` layout
/// (`image_id score xmin ymin xmax ymax`, 1-based), keyed by class name.
pub fn write_detections_per_class(records: &[DetectionRecord]) -> BTreeMap<String, String> {
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for r in records {
        let c = &r.corners;
        let _ = writeln!(
            files.entry(r.class_name.clone()).or_default(),
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            r.image_id,
            r.score,
            c.xmin + 1.0,
            c.ymin + 1.0,
            c.xmax,
            c.ymax
        );
    }
    files
}

fn parse_field(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Line {
            line,
            message: format!("invalid {what} `{field}`"),
        })
}

fn parse_corners(fields: &[&str], line: usize) -> Result<CornerBox> {
    let c = CornerBox {
        xmin: parse_field(fields[0], "xmin", line)?,
        ymin: parse_field(fields[1], "ymin", line)?,
        xmax: parse_field(fields[2], "xmax", line)?,
        ymax: parse_field(fields[3], "ymax", line)?,
    };
    if c.xmin >= c.xmax || c.ymin >= c.ymax {
        return Err(Error::Line {
            line,
            message: "degenerate box".into(),
        });
    }
    Ok(c)
}

pub fn read_detections(text: &str) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::Line {
                line,
                message: format!("expected 7 fields, found {}", f.len()),
            });
        }
        let score = parse_field(f[2], "score", line)?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore { line, score });
        }
        out.push(DetectionRecord {
            image_id: f[0].to_string(),
            class_name: f[1].to_string(),
            score,
            corners: parse_corners(&f[3..], line)?,
        });
    }
    Ok(out)
}

/// A proposal list: one `image_id xmin ymin xmax ymax` line per box, full
/// precision.
pub fn write_proposals(records: &[(String, CornerBox)]) -> String {
    let mut out = String::new();
    for (id, c) in records {
        let _ = writeln!(out, "{id} {} {} {} {}", c.xmin, c.ymin, c.xmax, c.ymax);
    }
    out
}

pub fn read_proposals(text: &str) -> Result<Vec<(String, CornerBox)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = raw.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::Line {
                line,
                message: format!("expected 5 fields, found {}", f.len()),
            });
        }
        out.push((f[0].to_string(), parse_corners(&f[1..], line)?));
    }
    Ok(out)
}

pub const TRACE_HEADER: &str = "detection_id,iteration,class,score,l_x,l_y,l_w,l_h";

/// Appends one CSV row per (detection, iteration) of `states` to `out`.
/// Detection ids are `<image_id>:<proposal index>`; iterations count from 1.
pub fn write_trace_rows(out: &mut String, image_id: &str, states: &[DetectionState], class_names: &[String]) {
    for (i, s) in states.iter().enumerate() {
        for (t, step) in s.trajectory.iter().enumerate() {
            let class = if step.predicted_class == 0 {
                "background"
            } else {
                class_names
                    .get(step.predicted_class - 1)
                    .map_or("unknown", String::as_str)
            };
            let b = step.bbox;
            let _ = writeln!(
                out,
                "{image_id}:{i},{},{class},{:.6},{:.6},{:.6},{:.6},{:.6}",
                t + 1,
                step.score,
                b.cx(),
                b.cy(),
                b.w(),
                b.h()
            );
        }
    }
}

/// Loss curve CSV with a `step,loss` header.
pub fn write_loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub mode: ApMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: ApMode::ElevenPoint,
        }
    }
}

/// Every tunable of a run, grouped by section.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub refine: RefinementConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// TOML document that [`load_config`] reads back to the same value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration values are representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config {
                key: "eval.iou_threshold".into(),
                message: "must lie in (0, 1]".into(),
            });
        }
        Ok(())
    }
}

const SECTIONS: [&str; 4] = ["synth", "train", "refine", "eval"];

fn section<T: DeserializeOwned + Default>(name: &str, table: Option<toml::Table>) -> Result<T> {
    let Some(table) = table else {
        return Ok(T::default());
    };
    // deserialize key by key first so a failure names the offending key
    for (key, value) in &table {
        let mut single = toml::Table::new();
        single.insert(key.clone(), value.clone());
        T::deserialize(single).map_err(|e| Error::Config {
            key: format!("{name}.{key}"),
            message: e.message().to_string(),
        })?;
    }
    T::deserialize(table).map_err(|e| Error::Config {
        key: name.to_string(),
        message: e.message().to_string(),
    })
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Builds a configuration from a TOML document, then applies
/// `section.key = value` overrides on top. Unknown keys and type mismatches
/// are rejected with the key named.
pub fn load_config_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config {
        key: "<document>".into(),
        message: e.to_string(),
    })?;
    for (path, raw) in overrides {
        let (sec, key) = path.split_once('.').ok_or_else(|| Error::Config {
            key: path.clone(),
            message: "expected `section.key`".into(),
        })?;
        let entry = doc
            .entry(sec.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(t) = entry else {
            return Err(Error::Config {
                key: sec.to_string(),
                message: "not a section".into(),
            });
        };
        t.insert(key.to_string(), override_value(raw));
    }
    let mut tables: BTreeMap<String, toml::Table> = BTreeMap::new();
    for (key, value) in doc {
        if !SECTIONS.contains(&key.as_str()) {
            return Err(Error::Config {
                key,
                message: "unknown section".into(),
            });
        }
        let toml::Value::Table(t) = value else {
            return Err(Error::Config {
                key,
                message: "expected a table".into(),
            });
        };
        tables.insert(key, t);
    }
    let cfg = RunConfig {
        synth: section("synth", tables.remove("synth"))?,
        train: section("train", tables.remove("train"))?,
        refine: section("refine", tables.remove("refine"))?,
        eval: section("eval", tables.remove("eval"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(text: &str) -> Result<RunConfig> {
    load_config_with_overrides(text, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"<annotation>
	<folder>VOC2007</folder>
	<filename>000005.jpg</filename>
	<size><width>500</width><height>375</height><depth>3</depth></size>
	<object>
		<name>chair</name>
		<pose>Rear</pose>
		<truncated>0</truncated>
		<bndbox><xmin>263</xmin><ymin>211</ymin><xmax>324</xmax><ymax>339</ymax></bndbox>
	</object>
</annotation>"#;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.synth.seed = 7;
        cfg.train.learning_rate = 3e-7;
        cfg.eval.mode = ApMode::Area;
        cfg.refine.pool_during_refinement = false;
        cfg.refine.pool_source = crate::refine::PoolSource::PreRegression;
        assert_eq!(load_config(&cfg.to_toml()).unwrap(), cfg);
        let overridden =
            load_config_with_overrides("", &[("refine.pool_source".into(), "pre_regression".into())]).unwrap();
        assert_eq!(overridden.refine.pool_source, crate::refine::PoolSource::PreRegression);
    }

    #[test]
    fn minimal_document() {
        let r = parse_voc_xml(MINIMAL).unwrap();
        assert_eq!(r.image_id, "000005");
        assert_eq!(r.extent, ImageExtent::new(500.0, 375.0).unwrap());
        assert_eq!(r.objects.len(), 1);
        let o = &r.objects[0];
        assert_eq!(o.name, "chair");
        assert!(!o.difficult);
        assert_eq!(
            o.corners,
            CornerBox {
                xmin: 262.0,
                ymin: 210.0,
                xmax: 324.0,
                ymax: 339.0
            }
        );
    }

    #[test]
    fn difficult_flag_and_empty_document() {
        let text = MINIMAL.replace("<pose>Rear</pose>", "<difficult>1</difficult>");
        assert!(parse_voc_xml(&text).unwrap().objects[0].difficult);
        let empty =
            "<annotation><filename>a.jpg</filename><size><width>5</width><height>5</height></size></annotation>";
        assert!(parse_voc_xml(empty).unwrap().objects.is_empty());
    }

    #[test]
    fn malformed_documents_rejected() {
        match parse_voc_xml("<annotation>\n<filename>a</filename>\n<size></annotation>") {
            Err(Error::Xml { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let no_xmax = MINIMAL.replace("<xmax>324</xmax>", "");
        match parse_voc_xml(&no_xmax) {
            Err(Error::Schema(e)) => assert_eq!(e, "bndbox/xmax"),
            other => panic!("{other:?}"),
        }
        let flipped = MINIMAL.replace("<xmax>324</xmax>", "<xmax>200</xmax>");
        assert!(matches!(parse_voc_xml(&flipped), Err(Error::DegenerateBox(_))));
        let nan = MINIMAL.replace("<xmax>324</xmax>", "<xmax>abc</xmax>");
        assert!(matches!(parse_voc_xml(&nan), Err(Error::Schema(_))));
    }

    #[test]
    fn xml_write_parse_is_fixed_point() {
        let r = parse_voc_xml(MINIMAL).unwrap();
        let again = parse_voc_xml(&write_voc_xml(&r)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn detection_file_errors() {
        assert!(read_detections("").unwrap().is_empty());
        match read_detections("a c 0.5 0 0 1 1\nb c 0.5 0 0 1\n") {
            Err(Error::Line { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_detections("a c 1.5 0 0 1 1"),
            Err(Error::InvalidScore { line: 1, .. })
        ));
        assert!(matches!(
            read_detections("a c 0.5 0 0 x 1"),
            Err(Error::Line { line: 1, .. })
        ));
    }

    #[test]
    fn per_class_export_uses_voc_convention() {
        let rec = DetectionRecord {
            image_id: "000001".into(),
            class_name: "dog".into(),
            score: 0.5,
            corners: CornerBox {
                xmin: 0.0,
                ymin: 1.0,
                xmax: 10.0,
                ymax: 11.0,
            },
        };
        let files = write_detections_per_class(&[rec]);
        assert_eq!(files["dog"], "000001 0.500000 1.000000 2.000000 10.000000 11.000000\n");
    }

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = load_config("").unwrap();
        assert_eq!(cfg.refine.iterations, 2);
        assert_eq!(cfg.refine.group_iou_threshold, 0.7);
        assert_eq!(cfg.refine.nms_iou_threshold, 0.45);
        assert_eq!(cfg.train.positive_iou, 0.5);
        assert_eq!(cfg.eval.mode, ApMode::ElevenPoint);

        let iter1 = load_config("[refine]\niterations = 1\n").unwrap();
        assert_eq!(iter1.refine.iterations, 1);

        match load_config("[refine]\niterations = 0\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "refine.iterations"),
            other => panic!("{other:?}"),
        }
        match load_config("[refine]\nbogus = 1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "refine.bogus"),
            other => panic!("{other:?}"),
        }
        match load_config("[train]\nbatch_size = \"many\"\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.batch_size"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_config("[nope]\n"), Err(Error::Config { .. })));

        let o = load_config_with_overrides(
            "[refine]\niterations = 3\n",
            &[
                ("refine.iterations".into(), "1".into()),
                ("eval.mode".into(), "area".into()),
            ],
        )
        .unwrap();
        assert_eq!(o.refine.iterations, 1);
        assert_eq!(o.eval.mode, ApMode::Area);
    }
}
