use tempfile::TempDir;
use vl_core::data::{gen_synthetic, read_ppm, GenTask, SplitCounts};

#[test]
#[ignore]
fn probe_images_distinct() {
    let dir = TempDir::new().unwrap();
    gen_synthetic(42, SplitCounts { train: 6, dev: 2 }, GenTask::Pretrain, dir.path()).unwrap();
    let mut sums = Vec::new();
    for i in 0..8 {
        let p = dir.path().join(format!("images/{i:06}.ppm"));
        let (_, _, rgb) = read_ppm(&p).unwrap();
        let distinct: std::collections::HashSet<&[u8]> = rgb.chunks(3).collect();
        let sum: u64 = rgb.iter().map(|b| *b as u64).sum();
        println!("image {i}: {} distinct colors, byte sum {sum}", distinct.len());
        sums.push(sum);
    }
    sums.dedup();
    println!("distinct sums: {}", sums.len());
}
