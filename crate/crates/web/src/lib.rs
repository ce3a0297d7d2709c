//! wasm-bindgen bindings for the static demo page in `www/`.

pub mod demo;

use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct SampleView {
    inner: demo::Rendered,
}

#[wasm_bindgen]
impl SampleView {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.inner.side
    }

    /// Row-major greyscale bytes, `side × side`.
    #[wasm_bindgen(getter)]
    pub fn pixels(&self) -> Vec<u8> {
        self.inner.pixels.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn keywords(&self) -> String {
        self.inner.keywords.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn report(&self) -> String {
        self.inner.report.clone()
    }
}

#[wasm_bindgen(js_name = renderSample)]
pub fn render_sample(seed: u32) -> SampleView {
    SampleView {
        inner: demo::render(seed as u64),
    }
}

#[wasm_bindgen]
pub struct DemoTrainer {
    inner: demo::Demo,
}

#[wasm_bindgen]
impl DemoTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, samples: usize) -> Result<DemoTrainer, JsError> {
        Ok(DemoTrainer {
            inner: demo::Demo::new(seed as u64, samples).map_err(|e| JsError::new(&e))?,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn params(&self) -> usize {
        self.inner.params()
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.inner.steps()
    }

    pub fn train(&mut self, n: usize) -> Result<f64, JsError> {
        self.inner.train(n).map_err(|e| JsError::new(&e))
    }

    pub fn generate(&self, image_seed: u32, keywords: &str) -> Result<String, JsError> {
        self.inner.generate(image_seed as u64, keywords).map_err(|e| JsError::new(&e))
    }
}

/// BLEU-1..4, ROUGE-L and CIDEr as a JSON string.
#[wasm_bindgen(js_name = scoreReports)]
pub fn score_reports(hypotheses: &str, references: &str) -> Result<String, JsError> {
    demo::score(hypotheses, references).map_err(|e| JsError::new(&e))
}
