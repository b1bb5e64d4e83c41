//! Serde adapter storing a [`Tensor`] as a nested JSON number list whose
//! nesting depth and lengths encode the shape.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::tensor::Tensor;

pub fn to_value(t: &Tensor) -> Value {
    fn build(shape: &[usize], data: &[f64]) -> Value {
        match shape.split_first() {
            None => Value::from(data[0]),
            Some((&n, rest)) => {
                let step: usize = rest.iter().product();
                Value::Array((0..n).map(|i| build(rest, &data[i * step..(i + 1) * step])).collect())
            }
        }
    }
    build(t.shape(), t.data())
}

pub fn from_value(v: &Value) -> Result<Tensor, String> {
    fn shape_of(v: &Value) -> Vec<usize> {
        let mut shape = Vec::new();
        let mut cur = v;
        while let Value::Array(items) = cur {
            shape.push(items.len());
            match items.first() {
                Some(first) => cur = first,
                None => break,
            }
        }
        shape
    }
    fn fill(v: &Value, shape: &[usize], out: &mut Vec<f64>) -> Result<(), String> {
        match (v, shape.split_first()) {
            (Value::Number(n), None) => {
                out.push(n.as_f64().ok_or("number out of range")?);
                Ok(())
            }
            (Value::Array(items), Some((&len, rest))) if items.len() == len => {
                items.iter().try_for_each(|it| fill(it, rest, out))
            }
            _ => Err("ragged or non-numeric array".into()),
        }
    }
    let shape = shape_of(v);
    if shape.is_empty() {
        return Err("expected an array".into());
    }
    let mut data = Vec::with_capacity(shape.iter().product());
    fill(v, &shape, &mut data)?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
    to_value(t).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
    let v = Value::deserialize(d)?;
    from_value(&v).map_err(D::Error::custom)
}
