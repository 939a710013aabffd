//! Browser bindings for three small bilevel KM demos. See `www/` for the page.

pub mod demo;

use wasm_bindgen::prelude::*;

fn js_err(e: gkm_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Paths {
    inner: demo::SelectionPaths,
}

#[wasm_bindgen]
impl Paths {
    #[wasm_bindgen(getter)]
    pub fn bmo(&self) -> Vec<f64> {
        self.inner.bmo.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn km(&self) -> Vec<f64> {
        self.inner.km.clone()
    }
}

#[wasm_bindgen(js_name = selectionPaths)]
pub fn selection_paths(alpha: f64, mu: f64, s_frac: f64, x0: f64, y0: f64, k: u32) -> Result<Paths, JsError> {
    demo::selection_paths(alpha, mu, s_frac, [x0, y0], k as usize)
        .map(|inner| Paths { inner })
        .map_err(js_err)
}

#[wasm_bindgen]
pub struct Curve {
    inner: demo::ResidualCurve,
}

#[wasm_bindgen]
impl Curve {
    #[wasm_bindgen(getter)]
    pub fn residuals(&self) -> Vec<f64> {
        self.inner.residuals.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn envelope(&self) -> Vec<f64> {
        self.inner.envelope.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn violations(&self) -> u32 {
        self.inner.violations as u32
    }

    #[wasm_bindgen(getter, js_name = divergedAt)]
    pub fn diverged_at(&self) -> Option<u32> {
        self.inner.diverged_at.map(|k| k as u32)
    }
}

#[wasm_bindgen(js_name = residualCurve)]
pub fn residual_curve(scale: f64, theta: f64, normalize: bool, k: u32) -> Result<Curve, JsError> {
    demo::residual_curve(scale, theta, normalize, k as usize)
        .map(|inner| Curve { inner })
        .map_err(js_err)
}

#[wasm_bindgen]
pub struct Training {
    inner: demo::BiasTraining,
}

#[wasm_bindgen]
impl Training {
    #[wasm_bindgen(getter, js_name = gradNorms)]
    pub fn grad_norms(&self) -> Vec<f64> {
        self.inner.grad_norms.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn bias(&self) -> Vec<f64> {
        self.inner.bias.to_vec()
    }
}

#[wasm_bindgen(js_name = trainBias)]
pub fn train_bias(cx: f64, cy: f64, lr: f64, t: u32) -> Result<Training, JsError> {
    demo::train_bias([cx, cy], lr, t as usize)
        .map(|inner| Training { inner })
        .map_err(js_err)
}
