use tin_core::model::{Model, ModelSpec, Variant};
use tin_core::encoding::{EncoderKind, TemporalEncoder};
use tin_core::dataio::{Interaction, Sample};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn toy_sample(history_cats: &[u32], target_cat: u32, label: u8) -> Sample {
    let history = history_cats.iter().enumerate().map(|(k, &c)| Interaction {
        user_id: 0, item_id: c, category_id: c, timestamp: 100 + k as i64 * 10,
    }).collect::<Vec<_>>();
    Sample { user_id: 0, history, target: Interaction { user_id: 0, item_id: target_cat, category_id: target_cat, timestamp: 200 }, label }
}

#[test]
fn diag() {
    // reproduce the exact sequence from the failing test
    let mut rng = ChaCha8Rng::seed_from_u64(0x9d2c);
    for variant in Variant::ALL {
        let encoder_kind = if variant.uses_temporal() { EncoderKind::TteP } else { EncoderKind::None };
        let spec = ModelSpec {
            variant, encoder: encoder_kind,
            n_categories: 4, n_items: 4, d_cat: 2, d_item: 2,
            mlp_hidden: vec![5, 3], max_len: 8, time_buckets: 4,
            d_ta: if variant == Variant::DinSplit { 4 } else { 0 },
            d_tr: if variant == Variant::DinSplit { 4 } else { 0 },
        };
        let encoder = match encoder_kind {
            EncoderKind::TteP => TemporalEncoder::tte_p(8),
            _ => TemporalEncoder::None,
        };
        let mut model = Model::init(spec, encoder, 71).unwrap();
        let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        model.load_flat_params(&theta).unwrap();
        if variant != Variant::TinWoTr { continue; }
        for s in [toy_sample(&[0, 1, 2], 3, 1), toy_sample(&[2, 2], 2, 0), toy_sample(&[1], 0, 1)] {
        // manually inspect: perturb param 52 and look at loss values
        let (loss0, grads) = model.flat_loss_grads(&s).unwrap();
        let h = 1e-4;
        let mut up = theta.clone(); up[52] += h;
        let mut dn = theta.clone(); dn[52] -= h;
        let mut w = model.clone();
        w.load_flat_params(&up).unwrap();
        let (lu, _) = w.flat_loss_grads(&s).unwrap();
        w.load_flat_params(&dn).unwrap();
        let (ld, _) = w.flat_loss_grads(&s).unwrap();
        println!("loss0={loss0} up={lu} dn={ld} fd={} an={}", (lu-ld)/(2.0*h), grads[52]);
        // dump layer-1 preactivations by hand: input x = [u, v~]
        let out = model.tim_forward(&s).unwrap();
        let u = out.u.as_slice().to_vec();
        println!("u = {u:?}");
        }
    }
}
