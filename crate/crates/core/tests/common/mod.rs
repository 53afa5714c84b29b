#![allow(dead_code)]

use robustct::attackers::{generate_attackers, AttackerModel};
use robustct::corpus;
use robustct::ir::{link, parse_library, parse_program, LibrarySource, Program, WholeProgram};

pub fn lib(src: &str) -> LibrarySource {
    parse_library(src).unwrap_or_else(|e| panic!("{e}\n{src}"))
}

pub fn app(src: &str) -> Program {
    parse_program(src).unwrap_or_else(|e| panic!("{e}\n{src}"))
}

pub fn whole(l: &LibrarySource, a: &Program) -> WholeProgram {
    link(&l.library, a).unwrap()
}

/// Closed programs built from generated attackers of every model linked
/// with corpus libraries: `n` per corpus entry, deterministic.
pub fn random_programs(n: usize) -> Vec<(LibrarySource, WholeProgram)> {
    let mut out = Vec::new();
    let models = AttackerModel::all();
    for (i, (_, source)) in corpus::constant_time_suite().into_iter().enumerate() {
        let model = &models[i % models.len()];
        let attackers = generate_attackers(&source.api, &source.secrets, model, n, i as u64).unwrap();
        for a in attackers {
            let w = link(&source.library, &a).unwrap();
            out.push((source.clone(), w));
        }
    }
    out
}
