use cfwatermark::data::synthetic_blobs;
use cfwatermark::explain::{self, CfConfig, CfMethod};
use cfwatermark::matrix::Matrix;
use cfwatermark::mlp::{self, TrainConfig};

fn main() {
    let ds = synthetic_blobs(400, 0.12, 42);
    let (train, test) = ds.split(0.4, 42);
    let cfg = TrainConfig { learning_rate: 0.01, epochs: 150, batch_size: 32, hidden: vec![16, 16], seed: 0 };
    let fw = mlp::train(&train.x, &train.y_matrix(), &cfg).unwrap();
    let labels = mlp::predict_labels(&fw, &test.x).unwrap();
    let acc = labels.iter().zip(&test.y).filter(|(&a, &b)| a == b).count() as f64 / test.n() as f64;
    println!("fw test acc {acc}");

    let rows: Vec<usize> = (0..32).collect();
    let half = test.x.gather_rows(&rows);
    let scores = mlp::predict_proba(&fw, &half).unwrap();
    let cf_cfg = CfConfig { method: CfMethod::Gradient, max_iter: 500, ..Default::default() };
    let batch = explain::generate_batch(&fw, &half, &[false, false], &cf_cfg).unwrap();
    println!("cf validity {}", explain::validity(&batch, &fw).unwrap());
    println!("cf proximity {}", explain::proximity(&batch));
    for i in 0..5 {
        let p_x = scores.get(i, 0);
        let p_cf = mlp::predict_one(&fw, batch.counterfactuals.row(i)).unwrap();
        println!("row {i}: x=({:.3},{:.3}) p(x)={:.4} -> cf=({:.3},{:.3}) p(cf)={:.4} target={}",
            half.get(i,0), half.get(i,1), p_x,
            batch.counterfactuals.get(i,0), batch.counterfactuals.get(i,1), p_cf, batch.target_labels[i]);
    }

    // MRCE-style training WITHOUT watermark
    let cf_y = Matrix::from_vec(32, 1, batch.target_labels.iter().map(|&l| f64::from(l)).collect());
    let tx = Matrix::concat_rows(&[&half, &batch.counterfactuals]).unwrap();
    let ty = Matrix::concat_rows(&[&scores, &cf_y]).unwrap();
    let sur = mlp::train(&tx, &ty, &cfg).unwrap();
    println!("mrce-no-wm agreement {}", mlp::agreement(&sur, &fw, &test.x).unwrap());

    // querying baseline
    let qx = test.x.gather_rows(&(0..64).collect::<Vec<_>>());
    let qy = mlp::predict_proba(&fw, &qx).unwrap();
    let sur_q = mlp::train(&qx, &qy, &cfg).unwrap();
    println!("querying agreement {}", mlp::agreement(&sur_q, &fw, &test.x).unwrap());

    // dualcf without watermark
    let scores2 = mlp::predict_proba(&fw, &batch.counterfactuals).unwrap();
    let batch2 = explain::generate_batch(&fw, &batch.counterfactuals, &[false, false], &cf_cfg).unwrap();
    let y2 = Matrix::from_vec(32, 1, batch2.target_labels.iter().map(|&l| f64::from(l)).collect());
    let dx = Matrix::concat_rows(&[&batch.counterfactuals, &batch2.counterfactuals]).unwrap();
    let dy = Matrix::concat_rows(&[&cf_y, &y2]).unwrap();
    let sur_d = mlp::train(&dx, &dy, &cfg).unwrap();
    println!("dualcf-no-wm agreement {}", mlp::agreement(&sur_d, &fw, &test.x).unwrap());
    for i in 0..5 {
        println!("dual row {i}: cf1=({:.3},{:.3}) y1={} cf2=({:.3},{:.3}) y2={} p_fw(cf2)={:.3}",
            batch.counterfactuals.get(i,0), batch.counterfactuals.get(i,1), batch.target_labels[i],
            batch2.counterfactuals.get(i,0), batch2.counterfactuals.get(i,1), batch2.target_labels[i],
            scores2.get(i,0));
    }
}
