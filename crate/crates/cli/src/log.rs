//! Line-oriented JSON events.

use std::io::Write;

use serde_json::{Map, Value};

pub struct EventLog<'a> {
    out: &'a mut dyn Write,
}

impl<'a> EventLog<'a> {
    pub fn new(out: &'a mut dyn Write) -> Self {
        Self { out }
    }

    /// Writes `{"event": name, ..fields}` as one line. Logging never aborts a
    /// command, so write failures are dropped.
    pub fn emit(&mut self, name: &str, fields: Value) {
        let _ = writeln!(self.out, "{}", event_line(name, fields));
    }
}

pub fn event_line(name: &str, fields: Value) -> String {
    let mut map = Map::new();
    map.insert("event".into(), Value::from(name));
    if let Value::Object(rest) = fields {
        map.extend(rest);
    }
    Value::Object(map).to_string()
}
