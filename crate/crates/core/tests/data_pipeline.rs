use stfm_core::data_model::{Image, ScaleConfig, Waveform};
use stfm_core::data_pipeline::dsp::tone;
use stfm_core::data_pipeline::io::{write_png, write_wav};
use stfm_core::data_pipeline::*;
use stfm_core::Error;
use stfm_tensor::Tensor;

fn gradient_frame(hw: usize, k: usize) -> Image {
    Image::new(Tensor::from_fn(&[hw, hw, 3], |i| ((i / 3 + k * 7) % 251) as f64 / 250.0)).unwrap()
}

fn source(fps: f64, seconds: f64, hw: usize, audio: Option<Waveform>) -> GeneratedSource<impl Fn(usize) -> Image> {
    GeneratedSource {
        fps,
        count: (fps * seconds).round() as usize,
        render: move |k| gradient_frame(hw, k),
        audio,
    }
}

fn speech(seconds: f64, sr: u32) -> Waveform {
    tone(180.0, 0.4, seconds, sr)
}

#[test]
fn paper_preset_keeps_first_twenty_seconds() {
    let cfg = ScaleConfig::paper();
    let plan = frame_plan(30.0, 900, &cfg).unwrap();
    assert_eq!(plan.len(), 500);
    assert_eq!(plan[1], 1);
    assert_eq!(*plan.last().unwrap(), (499.0f64 * 30.0 / 25.0).floor() as usize);
    let exact = frame_plan(25.0, 500, &cfg).unwrap();
    assert_eq!(exact, (0..500).collect::<Vec<_>>());
    assert!(matches!(frame_plan(25.0, 499, &cfg), Err(Error::Duration { .. })));
}

#[test]
fn desk_preprocess_resamples_and_resizes() {
    let cfg = ScaleConfig::desk();
    let src = source(30.0, 3.0, 96, Some(speech(3.0, 16_000)));
    let s = preprocess_sample("a", &src, &PassThroughTranscriber::new("abc"), &cfg).unwrap();
    assert_eq!(s.gt_frames.len(), cfg.frame_count);
    assert!(s.gt_frames.iter().all(|f| f.height() == 64 && f.width() == 64));
    assert_eq!(s.gt_audio.sample_rate, cfg.sample_rate);
    assert_eq!(s.gt_audio.len(), cfg.frame_count * cfg.samples_per_frame());
    assert_eq!(s.reference_audio.len(), cfg.reference_samples());
    assert_eq!(s.source_image, s.gt_frames[0]);
    assert_eq!(s.transcript, "abc");
}

#[test]
fn exact_length_input_is_accepted() {
    let cfg = ScaleConfig::desk();
    let src = source(25.0, cfg.clip_seconds(), 64, Some(speech(2.0, 8000)));
    let s = preprocess_sample("b", &src, &PassThroughTranscriber::new("x"), &cfg).unwrap();
    assert_eq!(s.gt_frames.len(), cfg.frame_count);
}

#[test]
fn silent_track_is_rejected_and_missing_audio_is_a_media_error() {
    let cfg = ScaleConfig::desk();
    let silent = source(25.0, 2.0, 64, Some(Waveform::new(vec![0.0; 16_000], 8000).unwrap()));
    let err = preprocess_sample("c", &silent, &PassThroughTranscriber::new("hello"), &cfg).unwrap_err();
    assert!(matches!(err, Error::Argument(ref m) if m.contains("empty transcript")), "{err}");
    let mute = source(25.0, 2.0, 64, None);
    assert!(matches!(
        preprocess_sample("d", &mute, &PassThroughTranscriber::new("hi"), &cfg),
        Err(Error::Media(_))
    ));
    let short = source(25.0, 1.0, 64, Some(speech(2.0, 8000)));
    assert!(matches!(
        preprocess_sample("e", &short, &PassThroughTranscriber::new("hi"), &cfg),
        Err(Error::Duration { .. })
    ));
}

#[test]
fn preprocessing_its_own_output_is_idempotent() {
    let cfg = ScaleConfig::desk();
    let audio = speech(2.0, 8000);
    let src = source(30.0, 3.0, 80, Some(audio.clone()));
    let tr = PassThroughTranscriber::new("abc");
    let first = preprocess_sample("f", &src, &tr, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (k, f) in first.gt_frames.iter().enumerate() {
        write_png(&dir.path().join("frames").join(frame_file_name(k)), f).unwrap();
    }
    write_wav(&dir.path().join("a.wav"), &audio).unwrap();
    let again = FrameDirSource::open(&dir.path().join("frames"), cfg.fps as f64, Some(&dir.path().join("a.wav"))).unwrap();
    let second = preprocess_sample("f", &again, &tr, &cfg).unwrap();
    assert_eq!(first.gt_frames, second.gt_frames);
}

#[test]
fn ffmpeg_arguments_are_fixed() {
    let args = ffmpeg_args("in.mp4".as_ref(), "out".as_ref(), "a.wav".as_ref(), 25, 16_000, 20.0);
    assert_eq!(args.len(), 2);
    assert!(args[0].windows(2).any(|w| w[0] == "-vf" && w[1] == "fps=25"));
    assert!(args[1].windows(2).any(|w| w[0] == "-ar" && w[1] == "16000"));
    assert!(args.iter().all(|a| a.windows(2).any(|w| w[0] == "-t" && w[1] == "20")));
}

#[test]
fn synthetic_manifest_round_trip() {
    let cfg = ScaleConfig::desk();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = generate_synthetic_dataset(d1.path(), 2, 9, "desk", &cfg).unwrap();
    let b = generate_synthetic_dataset(d2.path(), 2, 9, "desk", &cfg).unwrap();
    assert_eq!(a.entries, b.entries);
    let ids: Vec<_> = a.entries.iter().map(|e| e.identity.clone().unwrap()).collect();
    assert_ne!(ids[0].base_pitch, ids[1].base_pitch);
    assert_ne!(ids[0].head_radius, ids[1].head_radius);

    let loaded = DatasetManifest::load(d1.path(), &cfg).unwrap();
    assert_eq!(loaded.entries, a.entries);
    let samples = loaded.load_samples().unwrap();
    for s in &samples {
        s.validate(&cfg).unwrap();
        assert_eq!(s.gt_frames.len(), cfg.frame_count);
        assert!(s.geometry.is_some());
    }

    std::fs::remove_file(d1.path().join(&a.entries[0].image)).unwrap();
    assert!(matches!(DatasetManifest::load(d1.path(), &cfg), Err(Error::Io { .. })));
    assert!(DatasetManifest::load(d2.path(), &ScaleConfig { fps: 30, ..cfg }).is_err());
}
