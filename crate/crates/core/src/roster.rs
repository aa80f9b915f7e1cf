//! Enrolment list.
//!
//! CSV with a header row and the columns `student_id,name,site,addresses`.
//! `site` is `S` or `M`; `addresses` holds one or more addresses separated
//! by `;`. Addresses are compared lower-cased.
//!
//! ```text
//! student_id,name,site,addresses
//! nos1g14,Nora O'Shea,S,nora@uni.email.address;n.oshea@uni.email.address
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{Site, Student};

#[derive(Debug, Deserialize)]
struct Row {
    student_id: String,
    name: String,
    site: String,
    addresses: String,
}

#[derive(Debug, Clone, Default)]
pub struct Roster {
    students: BTreeMap<String, Student>,
    by_address: HashMap<String, String>,
}

pub fn normalize_address(addr: &str) -> String {
    addr.trim().to_lowercase()
}

impl Roster {
    pub fn load(path: &Path) -> Result<Self> {
        let reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        Self::from_reader(reader)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        Self::from_reader(reader)
    }

    fn from_reader<R: std::io::Read>(mut reader: csv::Reader<R>) -> Result<Self> {
        let mut students = Vec::new();
        for row in reader.deserialize::<Row>() {
            let row = row?;
            let email_addresses = row
                .addresses
                .split(';')
                .map(normalize_address)
                .filter(|a| !a.is_empty())
                .collect();
            students.push(Student {
                student_id: row.student_id,
                display_name: row.name,
                email_addresses,
                site: row.site.parse()?,
            });
        }
        Self::from_students(students)
    }

    pub fn from_students(list: impl IntoIterator<Item = Student>) -> Result<Self> {
        let mut roster = Roster::default();
        for s in list {
            if s.student_id.is_empty() {
                return Err(Error::config("roster entry with empty student_id"));
            }
            if s.email_addresses.is_empty() {
                return Err(Error::config(format!("student {} has no address", s.student_id)));
            }
            for a in &s.email_addresses {
                if let Some(other) = roster.by_address.insert(a.clone(), s.student_id.clone()) {
                    return Err(Error::config(format!(
                        "address {a} listed for both {other} and {}",
                        s.student_id
                    )));
                }
            }
            if roster.students.contains_key(&s.student_id) {
                return Err(Error::config(format!("duplicate student_id {}", s.student_id)));
            }
            roster.students.insert(s.student_id.clone(), s);
        }
        Ok(roster)
    }

    pub fn by_address(&self, addr: &str) -> Option<&Student> {
        self.by_address
            .get(&normalize_address(addr))
            .and_then(|id| self.students.get(id))
    }

    pub fn get(&self, student_id: &str) -> Option<&Student> {
        self.students.get(student_id)
    }

    pub fn students(&self) -> impl Iterator<Item = &Student> {
        self.students.values()
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        let mut sites: Vec<Site> = self.students.values().map(|s| s.site).collect();
        sites.sort();
        sites.dedup();
        sites.into_iter()
    }

    pub fn len(&self) -> usize {
        self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        self.students.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_looks_up_case_insensitively() {
        let r = Roster::from_csv(
            "student_id,name,site,addresses\n\
             s1,Nora O'Shea,S,Nora@Uni.Example; n.oshea@uni.example\n\
             s2,\"Doe, Jane\",M,jane@uni.example\n",
        )
        .unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.by_address("NORA@uni.example").unwrap().student_id, "s1");
        assert_eq!(r.by_address(" n.oshea@uni.example ").unwrap().student_id, "s1");
        assert_eq!(r.get("s2").unwrap().display_name, "Doe, Jane");
        assert_eq!(r.sites().collect::<Vec<_>>(), vec![Site::S, Site::M]);
        assert!(r.by_address("nobody@else").is_none());
    }

    #[test]
    fn duplicate_addresses_and_ids_are_rejected() {
        let dup_addr = "student_id,name,site,addresses\ns1,A,S,a@x\ns2,B,S,A@x\n";
        assert!(Roster::from_csv(dup_addr).is_err());
        let dup_id = "student_id,name,site,addresses\ns1,A,S,a@x\ns1,B,S,b@x\n";
        assert!(Roster::from_csv(dup_id).is_err());
        let bad_site = "student_id,name,site,addresses\ns1,A,Q,a@x\n";
        assert!(Roster::from_csv(bad_site).is_err());
        let no_addr = "student_id,name,site,addresses\ns1,A,S,\n";
        assert!(Roster::from_csv(no_addr).is_err());
    }
}
