use bsprune::decomposition::decompose_all;
use bsprune::graph::{build_template, count_flops, count_params, replace_head, trainable_param_count, NetGraph, Template, WeightInit};

fn prepared(t: Template, input: [usize; 3]) -> NetGraph {
    let g: NetGraph = build_template(t, input, 1000, WeightInit::ShapeOnly).unwrap();
    replace_head(&g, 10, 0).unwrap()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    ((value - target) / target).abs() <= rel
}

#[test]
fn table_counts() {
    for (t, input, params, flops, dec_total, dec_trainable, ptol) in [
        (Template::Vgg16, [128, 128, 3], 14.74e6, 5.03e9, 16.55e6, 17_765.0, 0.005),
        (Template::ResNet50, [128, 128, 3], 23.61e6, 1.29e9, 28.78e6, 86.86e3, 0.01),
        (Template::DenseNet121, [112, 112, 3], 7.05e6, 0.71e9, 8.40e6, 104.04e3, 0.01),
    ] {
        let g = prepared(t, input);
        let p = count_params(&g).total_params as f64;
        let f = count_flops(&g, None).unwrap().total_flops as f64;
        let d = decompose_all(&g, 0.5).unwrap();
        let dp = count_params(&d).total_params as f64;
        let dt = trainable_param_count(&d) as f64;
        println!("{t:?}: params {p} flops {f} decomposed {dp} trainable {dt} growth {:.4}", dp / p);
        assert!(within(p, params, 0.005), "{t:?} params {p}");
        assert!(within(f, flops, 0.05), "{t:?} flops {f}");
        assert!(within(dp, dec_total, ptol), "{t:?} decomposed {dp}");
        assert!(within(dt, dec_trainable, 0.01), "{t:?} trainable {dt}");
        assert!(dp / p < 1.22);
    }
}
