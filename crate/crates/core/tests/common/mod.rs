#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TEMPLATES: [&str; 5] = [
    "public static void copyFile(File source, File target) throws IOException {
    FileInputStream in = new FileInputStream(source);
    FileOutputStream out = new FileOutputStream(target);
    byte[] buffer = new byte[1024];
    int length;
    while ((length = in.read(buffer)) > 0) {
        out.write(buffer, 0, length);
    }
    in.close();
    out.close();
}",
    "public static boolean isPalindrome(String text) {
    int left = 0;
    int right = text.length() - 1;
    while (left < right) {
        if (text.charAt(left) != text.charAt(right)) {
            return false;
        }
        left++;
        right--;
    }
    return true;
}",
    "public static void bubbleSort(int[] values) {
    for (int i = 0; i < values.length; i++) {
        for (int j = 0; j < values.length - i - 1; j++) {
            if (values[j] > values[j + 1]) {
                int swap = values[j];
                values[j] = values[j + 1];
                values[j + 1] = swap;
            }
        }
    }
}",
    "public static long fibonacci(int n) {
    long previous = 0;
    long current = 1;
    for (int i = 0; i < n; i++) {
        long next = previous + current;
        previous = current;
        current = next;
    }
    return previous;
}",
    "public static String readFile(String path) throws IOException {
    StringBuilder builder = new StringBuilder();
    BufferedReader reader = new BufferedReader(new FileReader(path));
    String line;
    while ((line = reader.readLine()) != null) {
        builder.append(line).append(\"\\n\");
    }
    reader.close();
    return builder.toString();
}",
];

const NAMES: [&str; 24] = [
    "alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta", "zeta", "lambda", "count", "total", "index",
    "value", "state", "mode", "limit", "offset", "ratio", "scale", "owner", "label", "cache", "queue",
];
const TYPES: [&str; 5] = ["int", "long", "double", "String", "boolean"];

fn filler_member(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    let name = *NAMES.choose(rng).unwrap();
    let other = *NAMES.choose(rng).unwrap();
    match rng.random_range(0..4) {
        0 => out.push(format!("private {} {};", TYPES.choose(rng).unwrap(), name)),
        1 => out.push(format!("private int {} = {};", name, rng.random_range(0..1000))),
        2 => {
            out.push(format!("void {}() {{", name));
            out.push(format!("    {}({});", other, name));
            out.push("}".into());
        }
        _ => {
            out.push(format!("int {}(int {}) {{", name, other));
            out.push(format!("    return {} + {};", other, rng.random_range(0..100)));
            out.push("}".into());
        }
    }
}

/// A generated Java file holding one clone of `template` surrounded by
/// random members; returns the source and the clone's 1-based line span.
pub fn synthetic_file(template: usize, rng: &mut ChaCha8Rng) -> (String, u32, u32) {
    let cap = |s: &str| s[..1].to_uppercase() + &s[1..];
    let class = format!("{}{}", cap(NAMES.choose(rng).unwrap()), cap(NAMES.choose(rng).unwrap()));
    let mut lines = vec![format!("class {class} {{")];
    for _ in 0..rng.random_range(1..4) {
        filler_member(rng, &mut lines);
    }
    let start = lines.len() as u32 + 1;
    lines.extend(TEMPLATES[template].lines().map(str::to_string));
    let end = lines.len() as u32;
    for _ in 0..rng.random_range(1..4) {
        filler_member(rng, &mut lines);
    }
    lines.push("}".into());
    (lines.join("\n") + "\n", start, end)
}

/// Writes `files_per_template` files per template into numbered folders
/// under `root` and returns the reference and pair TSV text.
pub fn write_synthetic_corpus(root: &Path, files_per_template: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refs = String::new();
    let mut pairs = String::new();
    for (t, _) in TEMPLATES.iter().enumerate() {
        let fid = t as u32 + 1;
        fs::create_dir_all(root.join(fid.to_string())).unwrap();
        let mut previous: Option<(String, u32, u32)> = None;
        for k in 0..files_per_template {
            let (source, start, end) = synthetic_file(t, &mut rng);
            let rel = format!("{fid}/Sample{k}.java");
            fs::write(root.join(&rel), source).unwrap();
            writeln!(refs, "{rel}\t{start}\t{end}\t{fid}\t1").unwrap();
            if let Some((p, ps, pe)) = &previous {
                writeln!(pairs, "{p}\t{ps}\t{pe}\t{rel}\t{start}\t{end}\t{fid}\t1").unwrap();
            }
            previous = Some((rel, start, end));
        }
    }
    (refs, pairs)
}

/// Small fixture: folder 1 holds ten distinct files, folder 2 three,
/// folder 3 two plus one exact duplicate of a folder 1 file.
pub fn write_small_fixture(root: &Path) -> String {
    let mut refs = String::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (fid, n) in [(1u32, 10usize), (2, 3), (3, 2)] {
        fs::create_dir_all(root.join(fid.to_string())).unwrap();
        for k in 0..n {
            let (source, start, end) = synthetic_file(fid as usize - 1, &mut rng);
            let rel = format!("{fid}/F{k}.java");
            fs::write(root.join(&rel), source).unwrap();
            writeln!(refs, "{rel}\t{start}\t{end}\t{fid}\t1").unwrap();
            if k == 0 {
                writeln!(refs, "{rel}\t1\t1\t{fid}\t0").unwrap();
            }
        }
    }
    let dup = fs::read(root.join("1/F0.java")).unwrap();
    fs::write(root.join("3/Dup.java"), dup).unwrap();
    let dup_ref = refs.lines().next().unwrap().replacen("1/F0.java", "3/Dup.java", 1);
    writeln!(refs, "{dup_ref}").unwrap();
    refs
}
