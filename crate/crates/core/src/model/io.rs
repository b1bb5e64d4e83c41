//! JSON documents for models and sample sets.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{Map, Value};

use super::generate::{default_modality_names, SampleSet};
use super::{nested, LayerSpec, ModelGraph};
use crate::error::{Error, Result};

const VERSION: u64 = 1;

#[derive(Serialize)]
struct ModelDoc<'a> {
    version: u64,
    modalities: usize,
    modality_names: &'a [String],
    modality_inputs: BTreeMap<String, &'a str>,
    layers: &'a [LayerSpec],
    output: &'a str,
}

/// Compact UTF-8 JSON; identical models give identical bytes.
pub fn save_model(model: &ModelGraph) -> Vec<u8> {
    let doc = ModelDoc {
        version: VERSION,
        modalities: model.modalities(),
        modality_names: model.modality_names(),
        modality_inputs: model
            .modality_inputs()
            .iter()
            .enumerate()
            .map(|(m, id)| (m.to_string(), id.as_str()))
            .collect(),
        layers: model.layers(),
        output: model.output(),
    };
    serde_json::to_vec(&doc).expect("model documents always serialize")
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Document(format!("missing `{key}`")))
}

fn check_version(obj: &Map<String, Value>) -> Result<()> {
    match field(obj, "version")?.as_u64() {
        Some(VERSION) => Ok(()),
        other => Err(Error::Document(format!("unsupported version {other:?}"))),
    }
}

fn string_list(v: &Value, what: &str) -> Result<Vec<String>> {
    v.as_array()
        .and_then(|a| a.iter().map(|s| s.as_str().map(str::to_string)).collect())
        .ok_or_else(|| Error::Document(format!("`{what}` must be a list of strings")))
}

pub fn load_model(bytes: &[u8]) -> Result<ModelGraph> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| Error::Document(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Document("top level must be an object".into()))?;
    check_version(obj)?;
    let m = field(obj, "modalities")?
        .as_u64()
        .ok_or_else(|| Error::Document("`modalities` must be a positive integer".into()))? as usize;

    let map = field(obj, "modality_inputs")?
        .as_object()
        .ok_or_else(|| Error::Document("`modality_inputs` must be an object".into()))?;
    let mut inputs = vec![None; m];
    for (k, v) in map {
        let idx: usize = k
            .parse()
            .ok()
            .filter(|&i| i < m)
            .ok_or_else(|| Error::Document(format!("bad modality key `{k}`")))?;
        let id = v
            .as_str()
            .ok_or_else(|| Error::Document(format!("modality `{k}` must map to a layer id")))?;
        inputs[idx] = Some(id.to_string());
    }
    let inputs: Vec<String> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Document(format!("modality {i} has no input layer"))))
        .collect::<Result<_>>()?;

    let names = match obj.get("modality_names") {
        Some(v) => string_list(v, "modality_names")?,
        None => default_modality_names(m),
    };

    let raw_layers = field(obj, "layers")?
        .as_array()
        .ok_or_else(|| Error::Document("`layers` must be a list".into()))?;
    let mut layers = Vec::with_capacity(raw_layers.len());
    for (i, raw) in raw_layers.iter().enumerate() {
        let id = raw
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{i}"));
        let layer: LayerSpec = serde_json::from_value(raw.clone()).map_err(|e| Error::Parse {
            layer: id,
            msg: e.to_string(),
        })?;
        layers.push(layer);
    }
    let output = field(obj, "output")?
        .as_str()
        .ok_or_else(|| Error::Document("`output` must be a layer id".into()))?;
    ModelGraph::new(names, inputs, layers, output)
}

#[derive(Serialize)]
struct SampleDoc<'a> {
    version: u64,
    n: usize,
    modalities: &'a [String],
    samples: Vec<Map<String, Value>>,
}

pub fn save_samples(set: &SampleSet) -> Vec<u8> {
    let names = set.modality_names();
    let doc = SampleDoc {
        version: VERSION,
        n: set.len(),
        modalities: names,
        samples: set
            .samples()
            .iter()
            .map(|s| {
                names
                    .iter()
                    .zip(s)
                    .map(|(name, t)| (name.clone(), nested::to_value(t)))
                    .collect()
            })
            .collect(),
    };
    serde_json::to_vec(&doc).expect("sample documents always serialize")
}

pub fn load_samples(bytes: &[u8]) -> Result<SampleSet> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| Error::Document(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Document("top level must be an object".into()))?;
    check_version(obj)?;
    let names = string_list(field(obj, "modalities")?, "modalities")?;
    let raw = field(obj, "samples")?
        .as_array()
        .ok_or_else(|| Error::Document("`samples` must be a list".into()))?;
    if let Some(n) = obj.get("n") {
        if n.as_u64() != Some(raw.len() as u64) {
            return Err(Error::Document(format!("`n` = {n} but {} samples present", raw.len())));
        }
    }
    let mut samples = Vec::with_capacity(raw.len());
    for (k, s) in raw.iter().enumerate() {
        let tensors = names
            .iter()
            .map(|name| {
                let v = s
                    .get(name)
                    .ok_or_else(|| Error::Document(format!("sample {k} lacks modality `{name}`")))?;
                nested::from_value(v).map_err(|e| Error::Document(format!("sample {k} `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(tensors);
    }
    SampleSet::new(names, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_sample_set, gen_synthetic_model, GenSpec};

    fn small_spec() -> GenSpec {
        GenSpec {
            grid: (5, 4),
            include_attention: true,
            ..GenSpec::default()
        }
    }

    #[test]
    fn model_round_trip() {
        let m = gen_synthetic_model(12, &small_spec()).unwrap();
        let bytes = save_model(&m);
        let back = load_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_model(&back), bytes);
    }

    #[test]
    fn samples_round_trip() {
        let m = gen_synthetic_model(12, &small_spec()).unwrap();
        let s = gen_sample_set(1, &m, 3).unwrap();
        let back = load_samples(&save_samples(&s)).unwrap();
        assert_eq!(back, s);
    }

    fn doc(layers: &str, extra: &str) -> String {
        format!(r#"{{"version":1,"modalities":1,{extra}"layers":[{layers}],"output":"y"}}"#)
    }

    const INPUT: &str = r#"{"id":"x","kind":"Input","modality":0,"shape":[1],"inputs":[]}"#;

    #[test]
    fn cycle_names_layer() {
        let layers = format!(
            r#"{INPUT},{{"id":"a","kind":"ConcatFusion","axis":0,"inputs":["x","y"]}},{{"id":"y","kind":"ReLU","inputs":["a"]}}"#
        );
        let err = load_model(doc(&layers, r#""modality_inputs":{"0":"x"},"#).as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cycle") && (msg.contains("`a`") || msg.contains("`y`")), "{msg}");
    }

    #[test]
    fn missing_modality_map() {
        let layers = format!(r#"{INPUT},{{"id":"y","kind":"ConcatFusion","axis":0,"inputs":["x","x"]}}"#);
        let err = load_model(doc(&layers, "").as_bytes()).unwrap_err();
        assert!(err.to_string().contains("modality_inputs"), "{err}");
        assert!(load_model(doc(&layers, r#""modality_inputs":{"0":"x"},"#).as_bytes()).is_ok());
    }

    #[test]
    fn unknown_kind_and_dangling_input() {
        let layers = format!(r#"{INPUT},{{"id":"y","kind":"Sigmoid","inputs":["x"]}}"#);
        let err = load_model(doc(&layers, r#""modality_inputs":{"0":"x"},"#).as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Parse { layer, .. } if layer == "y"), "{err}");

        let layers = format!(r#"{INPUT},{{"id":"y","kind":"ConcatFusion","axis":0,"inputs":["x","ghost"]}}"#);
        let err = load_model(doc(&layers, r#""modality_inputs":{"0":"x"},"#).as_bytes()).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }
}
