//! Programmatic model-document generators used by tests and examples: a
//! ResNet-50-style bottleneck network at a configurable input resolution and
//! randomized small models for property testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn rand_weights(rng: &mut ChaCha8Rng, len: usize, bits: u32) -> Vec<i64> {
    // keep magnitudes small so deep stacks stay informative after shifts
    let lim = (1i64 << (bits - 1)) - 1;
    let span = lim.min(3);
    (0..len).map(|_| rng.gen_range(-span..=span)).collect()
}

fn fmt(bits: u32, frac: i32) -> Value {
    json!({"bits": bits, "frac": frac, "signed": true})
}

fn weights(rng: &mut ChaCha8Rng, len: usize, bits: u32, frac: i32) -> Value {
    json!({"bits": bits, "frac": frac, "signed": true, "data": rand_weights(rng, len, bits)})
}

/// ResNet-50 bottleneck network: 53 convolutions, one dense layer, two
/// pooling layers, and 17 skip connections, at input `[1, hw, hw, 3]`.
///
/// Besides the 16 block residuals there is one intra-block shortcut in the
/// final bottleneck, matching the published layer census.
pub fn resnet50_json(hw: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Value> = Vec::new();
    let bits = 8;
    let frac = 4;
    let shift = 6u32;

    let conv = |layers: &mut Vec<Value>,
                    rng: &mut ChaCha8Rng,
                    id: &str,
                    from: &str,
                    k: usize,
                    cin: usize,
                    cout: usize,
                    stride: usize| {
        layers.push(json!({
            "id": id,
            "kind": "conv2d",
            "kernel": [k, k],
            "out_channels": cout,
            "stride": [stride, stride],
            "padding": "same",
            "weights": weights(rng, k * k * cin * cout, bits, frac),
            "bias": null,
            "out_shift": shift,
            "out_format": fmt(bits, frac),
            "inputs": if from.is_empty() { json!([]) } else { json!([from]) },
        }));
    };
    let relu = |layers: &mut Vec<Value>, id: &str, from: &str| {
        layers.push(json!({
            "id": id, "kind": "activation", "func": "relu", "inputs": [from],
        }));
    };
    let add = |layers: &mut Vec<Value>, id: &str, a: &str, b: &str| {
        layers.push(json!({"id": id, "kind": "add", "inputs": [a, b]}));
    };

    conv(&mut layers, &mut rng, "conv1", "", 7, 3, 64, 2);
    relu(&mut layers, "conv1_relu", "conv1");
    layers.push(json!({
        "id": "pool1", "kind": "maxpool", "kernel": [3, 3], "stride": [2, 2],
        "padding": "same", "inputs": ["conv1_relu"],
    }));

    let stages: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];
    let mut prev = String::from("pool1");
    let mut cin = 64usize;
    let mut spatial = hw.div_ceil(2).div_ceil(2);
    let total_blocks: usize = stages.iter().map(|s| s.1).sum();
    let mut block_no = 0usize;
    for (si, &(cm, blocks)) in stages.iter().enumerate() {
        let cout = cm * 4;
        for bi in 0..blocks {
            block_no += 1;
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            if stride == 2 {
                spatial = spatial.div_ceil(2);
            }
            let p = format!("s{si}b{bi}");
            conv(&mut layers, &mut rng, &format!("{p}_a"), &prev, 1, cin, cm, stride);
            relu(&mut layers, &format!("{p}_a_relu"), &format!("{p}_a"));
            conv(&mut layers, &mut rng, &format!("{p}_b"), &format!("{p}_a_relu"), 3, cm, cm, 1);
            // the last bottleneck carries an extra intra-block shortcut
            let (b_out, extra) = if block_no == total_blocks {
                add(&mut layers, &format!("{p}_inner"), &format!("{p}_b"), &format!("{p}_a_relu"));
                (format!("{p}_inner"), true)
            } else {
                (format!("{p}_b"), false)
            };
            let _ = extra;
            relu(&mut layers, &format!("{p}_b_relu"), &b_out);
            conv(&mut layers, &mut rng, &format!("{p}_c"), &format!("{p}_b_relu"), 1, cm, cout, 1);
            let shortcut = if bi == 0 {
                conv(&mut layers, &mut rng, &format!("{p}_proj"), &prev, 1, cin, cout, stride);
                format!("{p}_proj")
            } else {
                prev.clone()
            };
            add(&mut layers, &format!("{p}_add"), &format!("{p}_c"), &shortcut);
            relu(&mut layers, &format!("{p}_out"), &format!("{p}_add"));
            prev = format!("{p}_out");
            cin = cout;
        }
    }

    layers.push(json!({
        "id": "pool2", "kind": "avgpool", "kernel": [spatial, spatial],
        "stride": [1, 1], "padding": "valid", "inputs": [prev],
    }));
    layers.push(json!({"id": "flat", "kind": "flatten", "inputs": ["pool2"]}));
    layers.push(json!({
        "id": "fc", "kind": "dense", "out_channels": 1000,
        "weights": weights(&mut rng, 2048 * 1000, bits, frac),
        "bias": weights(&mut rng, 1000, 16, frac),
        "out_shift": shift, "out_format": fmt(bits, frac), "inputs": ["flat"],
    }));

    json!({
        "name": format!("resnet50-{hw}"),
        "input": {"shape": [1, hw, hw, 3], "format": fmt(bits, frac)},
        "layers": layers,
    })
    .to_string()
}

/// Random input tensor data for a model's input shape.
pub fn random_input_data(len: usize, bits: u32, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lim = (1i64 << (bits - 1)) - 1;
    (0..len).map(|_| rng.gen_range(-lim..=lim)).collect()
}

/// A small random model: a chain of conv/dense/matmul layers with random
/// shapes and 4- or 8-bit weights, optionally with a skip connection and
/// pixel-wise tails.
pub fn random_model_json(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = if rng.gen_bool(0.5) { 4 } else { 8 };
    let frac = rng.gen_range(0..=2);
    let shift = rng.gen_range(2..=5) as u32;

    let kind: u8 = rng.gen_range(0..3);
    match kind {
        0 => {
            // conv chain, optionally strided/valid, with relu and a skip
            let n = rng.gen_range(1..=2usize);
            let h = rng.gen_range(3..=10usize);
            let w = rng.gen_range(3..=10usize);
            let c0 = rng.gen_range(1..=6usize);
            let depth = rng.gen_range(1..=3usize);
            let mut layers: Vec<Value> = Vec::new();
            let mut cin = c0;
            let mut prev = String::new();
            let mut skip_of: Option<(String, usize)> = None;
            for d in 0..depth {
                let choices: Vec<usize> =
                    [1usize, 3, 5].into_iter().filter(|&k| k <= h && k <= w).collect();
                let k = choices[rng.gen_range(0..choices.len())];
                let cout = rng.gen_range(1..=8usize);
                let id = format!("c{d}");
                layers.push(json!({
                    "id": id, "kind": "conv2d", "kernel": [k, k], "out_channels": cout,
                    "stride": [1, 1], "padding": "same",
                    "weights": weights(&mut rng, k * k * cin * cout, bits, frac),
                    "bias": if rng.gen_bool(0.5) { weights(&mut rng, cout, 16, frac) } else { Value::Null },
                    "out_shift": shift, "out_format": fmt(8, frac),
                    "inputs": if d == 0 { json!([]) } else { json!([prev]) },
                }));
                prev = format!("c{d}");
                // pixel-wise tail in fusible order: add first, then relu
                if let Some((sid, sc)) = &skip_of {
                    if *sc == cout && rng.gen_bool(0.5) {
                        layers.push(json!({"id": format!("s{d}"), "kind": "add", "inputs": [prev, sid]}));
                        prev = format!("s{d}");
                        skip_of = None;
                    }
                }
                if rng.gen_bool(0.4) {
                    layers.push(json!({"id": format!("r{d}"), "kind": "activation", "func": "relu", "inputs": [prev]}));
                    prev = format!("r{d}");
                }
                if skip_of.is_none() && d + 1 < depth && rng.gen_bool(0.4) {
                    skip_of = Some((prev.clone(), cout));
                }
                cin = cout;
            }
            json!({
                "name": format!("rand-conv-{seed}"),
                "input": {"shape": [n, h, w, c0], "format": fmt(8, frac)},
                "layers": layers,
            })
            .to_string()
        }
        1 => {
            // dense stack over a flattened input
            let batch = rng.gen_range(1..=4usize);
            let f0 = rng.gen_range(2..=24usize);
            let depth = rng.gen_range(1..=3usize);
            let mut layers: Vec<Value> = Vec::new();
            let mut fin = f0;
            for d in 0..depth {
                let fout = rng.gen_range(1..=24usize);
                layers.push(json!({
                    "id": format!("d{d}"), "kind": "dense", "out_channels": fout,
                    "weights": weights(&mut rng, fin * fout, bits, frac),
                    "bias": if rng.gen_bool(0.5) { weights(&mut rng, fout, 16, frac) } else { Value::Null },
                    "out_shift": shift, "out_format": fmt(8, frac),
                    "inputs": if d == 0 { json!([]) } else { json!([format!("d{}", d - 1)]) },
                }));
                fin = fout;
            }
            json!({
                "name": format!("rand-dense-{seed}"),
                "input": {"shape": [batch, 1, 1, f0], "format": fmt(8, frac)},
                "layers": layers,
            })
            .to_string()
        }
        _ => {
            // matmul chain [1,R,1,I]
            let rows = rng.gen_range(1..=12usize);
            let i0 = rng.gen_range(1..=16usize);
            let depth = rng.gen_range(1..=2usize);
            let mut layers: Vec<Value> = Vec::new();
            let mut fin = i0;
            for d in 0..depth {
                let fout = rng.gen_range(1..=16usize);
                layers.push(json!({
                    "id": format!("m{d}"), "kind": "matmul", "out_channels": fout,
                    "weights": weights(&mut rng, fin * fout, bits, frac),
                    "out_shift": shift, "out_format": fmt(8, frac),
                    "inputs": if d == 0 { json!([]) } else { json!([format!("m{}", d - 1)]) },
                }));
                fin = fout;
            }
            json!({
                "name": format!("rand-matmul-{seed}"),
                "input": {"shape": [1, rows, 1, i0], "format": fmt(8, frac)},
                "layers": layers,
            })
            .to_string()
        }
    }
}

/// A single-head attention model for decomposition tests.
pub fn attention_json(seq: usize, dim: usize, heads: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    json!({
        "name": format!("attn-{seq}x{dim}h{heads}"),
        "input": {"shape": [1, seq, 1, dim], "format": fmt(8, 4)},
        "layers": [{
            "id": "att", "kind": "attention", "out_channels": dim, "heads": heads,
            "weights": weights(&mut rng, 4 * dim * dim, 8, 6),
            "out_shift": 6, "out_format": fmt(8, 4), "inputs": [],
        }],
    })
    .to_string()
}
