//! CSV emission helpers. Each table starts with a schema comment line so
//! files are self-describing; numbers use the shortest round-trip float
//! format, making outputs byte-stable for fixed inputs.

use std::fmt::Write as _;

pub struct Table {
    pub schema: &'static str,
    buf: String,
}

impl Table {
    pub fn new(schema: &'static str, header: &str) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "# dcb-schema: {schema}");
        let _ = writeln!(buf, "{header}");
        Self { schema, buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format!("{v}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}
