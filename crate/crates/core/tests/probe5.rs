mod common;
use common::*;
use vl_core::models::{InitSource, Model};
use vl_core::rng::{stream, Domain};
use vl_core::tensor::{Graph, IdMatrix, KeyMask, Tensor};
use rand::Rng;

#[test]
#[ignore]
fn probe_image_reaches_text_states() {
    let config = tiny_two_tower(20);
    let (model, _) = Model::<f32>::build(&config, &InitSource::random()).unwrap();
    let ids = IdMatrix::new(1, 5, vec![1, 6, 7, 8, 2]);
    let mask = KeyMask::all_valid(1, 5);
    let mut rng = stream(1, Domain::DataGen, 0, 0);
    let img_a_data: Vec<f32> = (0..32*32*3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let img_b_data: Vec<f32> = img_a_data.iter().map(|v| -v).collect();
    let img_a = Tensor::from_vec(vec![1,32,32,3], img_a_data).unwrap();
    let img_b = Tensor::from_vec(vec![1,32,32,3], img_b_data).unwrap();
    let g = Graph::inference();
    let out_a = model.forward(&g, &ids, &mask, &img_a).unwrap();
    let out_b = model.forward(&g, &ids, &mask, &img_b).unwrap();
    let ta = out_a.text_states.to_vec();
    let tb = out_b.text_states.to_vec();
    let max_delta = ta.iter().zip(&tb).map(|(x,y)| (x-y).abs()).fold(0.0f32, f32::max);
    println!("max |delta| text states under image change: {max_delta:e}");
    let va = out_a.vision_states.to_vec();
    let vb = out_b.vision_states.to_vec();
    let vd = va.iter().zip(&vb).map(|(x,y)| (x-y).abs()).fold(0.0f32, f32::max);
    println!("max |delta| vision states: {vd:e}");
    let pa = out_a.pooled.to_vec();
    let pb = out_b.pooled.to_vec();
    let pd = pa.iter().zip(&pb).map(|(x,y)| (x-y).abs()).fold(0.0f32, f32::max);
    println!("max |delta| pooled: {pd:e}");
}
