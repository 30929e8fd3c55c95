//! Inputs shared by the criterion benches.

use drivecot_core::scene::{CameraSet, ImageSource};
use image::RgbaImage;

/// A long free-form answer in the line grammar followed by a decision.
pub fn long_answer(objects: usize) -> String {
    let mut text = String::from("Step 1 - Observe: a wet urban intersection at dusk.\n\nStep 2 - Identify:\n");
    for i in 0..objects {
        let category = ["car", "people", "traffic light", "pedestrian crossing"][i % 4];
        text.push_str(&format!(
            "ID: {}\nCategory: {category}\nPosition: lane {}\nPixel-Coordinates: ({}, {})\nState: moving slowly\n\n",
            i + 1,
            i % 3,
            (i * 37) % 1600,
            (i * 11) % 900
        ));
    }
    text.push_str(
        "Step 4 - Decide: the light ahead is red, so I would slow down and then stop.\nFinal Decision: stop\n",
    );
    text
}

/// Six cameras of `width` x `height` with distinct pixel content.
pub fn camera_set(width: u32, height: u32) -> CameraSet {
    let mut tag = 0u8;
    CameraSet::from_lookup(|cam| {
        tag += 1;
        let raster = RgbaImage::from_fn(width, height, |x, y| image::Rgba([tag, x as u8, y as u8, 255]));
        Some(ImageSource::from_raster(cam.name(), raster))
    })
    .expect("all six cameras supplied")
}
