//! Built-in example libraries, all classically constant-time except
//! `BRANCHY`.

use crate::ir::{parse_library, LibrarySource};

/// Stream-cipher analog whose stack copy of the key is never cleared.
pub const KCOPY_LEAKY: &str = include_str!("../corpus/kcopy_leaky.ir");
/// The same library with the key copy cleared before return.
pub const KCOPY: &str = include_str!("../corpus/kcopy.ir");
/// MAC analog leaving keyed data in a caller-supplied scratch buffer.
pub const MAC: &str = include_str!("../corpus/mac.ir");
/// Key-exchange analog with a declassified output written in two passes.
pub const DH: &str = include_str!("../corpus/dh.ir");
/// Several API functions, a private helper and an API-to-API call.
pub const MULTI: &str = include_str!("../corpus/multi.ir");
/// Leaves a key cell in a scratch register.
pub const RESIDUE: &str = include_str!("../corpus/residue.ir");
/// Bounds-checked table lookup next to keyed data.
pub const LOOKUP: &str = include_str!("../corpus/lookup.ir");
/// Never reads secret data.
pub const PUBLIC: &str = include_str!("../corpus/public.ir");
/// Branches on a secret.
pub const BRANCHY: &str = include_str!("../corpus/branchy.ir");
/// Stream-cipher analog with the message length left as `${SIZE}`.
pub const STREAM_TEMPLATE: &str = include_str!("../corpus/stream.ir.tmpl");

/// Substitute `${SIZE}` in a library template.
pub fn instantiate(template: &str, size: usize) -> String {
    template.replace("${SIZE}", &size.to_string())
}

/// The stream-cipher analog over `size` message cells.
pub fn stream(size: usize) -> LibrarySource {
    load(&instantiate(STREAM_TEMPLATE, size))
}

/// Parse a built-in library. Panics on malformed text, which is a bug in
/// the corpus.
pub fn load(text: &str) -> LibrarySource {
    parse_library(text).unwrap_or_else(|e| panic!("corpus library fails to parse: {e}"))
}

/// The constant-time libraries the compiler is validated against, in their
/// unmitigated form.
pub fn constant_time_suite() -> Vec<(&'static str, LibrarySource)> {
    [
        ("stream", KCOPY_LEAKY),
        ("mac", MAC),
        ("dh", DH),
        ("multi", MULTI),
        ("residue", RESIDUE),
        ("lookup", LOOKUP),
        ("public", PUBLIC),
    ]
    .into_iter()
    .map(|(n, t)| (n, load(t)))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::check_library;

    #[test]
    fn every_entry_parses_and_is_well_formed() {
        let mut all: Vec<LibrarySource> = constant_time_suite().into_iter().map(|(_, s)| s).collect();
        all.push(load(KCOPY));
        all.push(load(BRANCHY));
        all.push(stream(1));
        all.push(stream(4096));
        for s in all {
            check_library(&s.library, &s.api, &s.secrets).unwrap();
        }
    }

    #[test]
    fn printing_round_trips() {
        for (name, s) in constant_time_suite() {
            assert_eq!(parse_library(&s.to_string()).unwrap(), s, "{name}");
        }
    }
}
