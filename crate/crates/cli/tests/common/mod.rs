#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use radiomae::datamodel::{make_splits, ImageSource, SplitParams};
use radiomae::finetune::{BackboneConfig, ConvConfig, GlobalPool};
use radiomae::multihead::{train_multihead, MultiheadConfig, WholeImageProposer};
use radiomae::synthgen::{generate_corpus, memory_source, CorpusItem, CorpusSpec, TASK_ABNORMALITY};
use radiomae_cli::service::{serve, AppState};

/// Region corpus plus a one-epoch checkpoint on a tiny conv backbone.
pub fn tiny_checkpoint(dir: &Path) -> (Vec<CorpusItem>, PathBuf) {
    let items = generate_corpus(&CorpusSpec::new(16, 16, 48, 3)).unwrap();
    let source = memory_source(&items).unwrap();
    let params = SplitParams::new(0.2, 2, 0).stratify(TASK_ABNORMALITY).group_by("patient_id");
    let plan = make_splits(source.manifest(), &params).unwrap();
    let mut config = MultiheadConfig::toy();
    config.epochs = 1;
    config.batch_size = 8;
    config.backbone = BackboneConfig::Conv(ConvConfig {
        image_size: [16, 16],
        channels: 1,
        widths: vec![4],
        pool: GlobalPool::Max,
    });
    config.crop.out_size = 16;
    let result = train_multihead(&source, &plan, &config, dir).unwrap();
    let ckpt = result.folds[0].checkpoint.clone();
    (items, ckpt)
}

/// Starts the service on an ephemeral port and returns its base URL.
pub async fn spawn_server(checkpoint: &Path) -> String {
    let state = Arc::new(AppState::load(checkpoint, Box::new(WholeImageProposer)).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, state));
    format!("http://{addr}")
}

pub fn image_form(png: Vec<u8>, id: Option<&str>) -> reqwest::multipart::Form {
    let part = reqwest::multipart::Part::bytes(png).file_name("upload.png").mime_str("image/png").unwrap();
    let form = reqwest::multipart::Form::new().part("image", part);
    match id {
        Some(id) => form.text("id", id.to_string()),
        None => form,
    }
}
