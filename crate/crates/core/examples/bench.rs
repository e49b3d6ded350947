use echosynth::model::*;
use echosynth::training::*;
use std::time::Instant;
fn main(){
  let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
  let (gb, db, crop, nl) = (args[0], args[1], args[2], args[3]);
  for v in [Variant::Sa2h, Variant::Nsa2h] {
  let gen = v.generator_config(gb, 6);
  let disc = DiscriminatorConfig{n_layers:nl, base_channels:db, condition_channels:gen.cond_channels()};
  let h=256; let w=256;
  let ex = Example{ id:"x".into(), height:h, width:w, s:vec![0.0;h*w], a:vec![0.0;h*w], low:None, y:vec![0.5;h*w], mask:vec![1.0;h*w], shadow:vec![false;h*w]};
  let data: Vec<Example> = (0..8).map(|_| ex.clone()).collect();
  let tc = TrainConfig{crop, batch_size:4, epochs:1, ..TrainConfig::default()};
  let t=Instant::now();
  train(&tc,&gen,&disc,&data,None).unwrap();
  println!("{v} {} params, {:.2}s/step", Generator::<f32>::new(&gen,0).unwrap().param_count(), t.elapsed().as_secs_f64()/2.0);
  }
}
