//! Tabular command output rendered as CSV or JSON. Every rendering carries
//! the config hash and seed.

use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub command: &'static str,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// Extra top-level fields of the JSON rendering.
    pub meta: Map<String, Value>,
}

impl Table {
    pub fn new(command: &'static str, columns: &[&str]) -> Self {
        Self {
            command,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            meta: Map::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format, config_hash: &str, seed: u64) -> String {
        match format {
            Format::Csv => self.render_csv(config_hash, seed),
            Format::Json => self.render_json(config_hash, seed),
        }
    }

    fn render_csv(&self, config_hash: &str, seed: u64) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let seed = seed.to_string();
        let mut header: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        header.extend(["config_hash", "seed"]);
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec: Vec<String> = row.iter().map(csv_cell).collect();
            rec.push(config_hash.to_string());
            rec.push(seed.clone());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    fn render_json(&self, config_hash: &str, seed: u64) -> String {
        let mut top = Map::new();
        top.insert("command".into(), self.command.into());
        top.insert("config_hash".into(), config_hash.into());
        top.insert("seed".into(), seed.into());
        for (k, v) in &self.meta {
            top.insert(k.clone(), v.clone());
        }
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| Value::Object(self.columns.iter().cloned().zip(r.iter().cloned()).collect()))
            .collect();
        top.insert("rows".into(), Value::Array(rows));
        let mut s = serde_json::to_string_pretty(&Value::Object(top)).expect("json value");
        s.push('\n');
        s
    }
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        other => other.to_string(),
    }
}

/// JSON number for a float; non-finite values become null.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn csv_and_json_carry_hash_and_seed() {
        let mut t = Table::new("demo", &["a", "b"]);
        t.push(vec![json!("x,y"), num(0.5)]);
        let csv = t.render(Format::Csv, "abcd", 7);
        assert_eq!(csv, "a,b,config_hash,seed\n\"x,y\",0.5,abcd,7\n");
        let v: Value = serde_json::from_str(&t.render(Format::Json, "abcd", 7)).unwrap();
        assert_eq!(v["config_hash"], "abcd");
        assert_eq!(v["seed"], 7);
        assert_eq!(v["rows"][0]["a"], "x,y");
    }
}
