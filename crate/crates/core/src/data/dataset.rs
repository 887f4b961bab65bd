use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::folds::FoldPlan;
use super::recording::Recording;
use super::window::{window_all, ShortRecording, WindowParams, WindowRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviations below this are clamped before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-scoring statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population standard deviation over every sample of every
    /// window; samples shared by overlapping windows count once per window.
    pub fn from_windows(recordings: &[Recording], windows: &[WindowRef], window: usize) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("windows", "no windows to compute statistics from"))?;
        let d = recordings[first.recording].channels();
        // coverage[t] = number of windows containing sample t, per recording
        let mut by_rec: Vec<Vec<i64>> = vec![Vec::new(); recordings.len()];
        for w in windows {
            let cov = &mut by_rec[w.recording];
            if cov.is_empty() {
                cov.resize(recordings[w.recording].samples() + 1, 0);
            }
            cov[w.start] += 1;
            cov[w.start + window] -= 1;
        }
        let mut count = 0.0f64;
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for (r, cov) in by_rec.iter().enumerate() {
            if cov.is_empty() {
                continue;
            }
            let rec = &recordings[r];
            let mut c = 0i64;
            for t in 0..rec.samples() {
                c += cov[t];
                if c == 0 {
                    continue;
                }
                let wgt = c as f64;
                count += wgt;
                for (j, &x) in rec.rows(t, 1).iter().enumerate() {
                    sum[j] += wgt * x as f64;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for (r, cov) in by_rec.iter().enumerate() {
            if cov.is_empty() {
                continue;
            }
            let rec = &recordings[r];
            let mut c = 0i64;
            for t in 0..rec.samples() {
                c += cov[t];
                if c == 0 {
                    continue;
                }
                for (j, &x) in rec.rows(t, 1).iter().enumerate() {
                    let dx = x as f64 - mean[j];
                    sq[j] += c as f64 * dx * dx;
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        Ok(NormStats { mean, std })
    }

    fn apply(&self, src: &[f32], dst: &mut [f32]) {
        let d = self.mean.len();
        for (row_in, row_out) in src.chunks(d).zip(dst.chunks_mut(d)) {
            for j in 0..d {
                let s = self.std[j].max(STD_FLOOR);
                row_out[j] = ((row_in[j] as f64 - self.mean[j]) / s) as f32;
            }
        }
    }
}

/// Metadata of one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowInfo {
    pub subject_id: u32,
    pub gesture_id: u32,
    pub trial_id: u32,
    pub start: usize,
    /// Index into the pattern label space.
    pub pattern: usize,
    /// Index into the subject label space; `None` for subjects outside it.
    pub subject: Option<usize>,
}

/// Windows over a shared set of recordings, with label encodings and
/// optional normalization.
///
/// Samples are cut from the recordings on demand.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    recordings: Arc<Vec<Recording>>,
    windows: Vec<WindowRef>,
    info: Vec<WindowInfo>,
    params: WindowParams,
    channels: usize,
    gesture_ids: Vec<u32>,
    subject_ids: Vec<u32>,
    norm: Option<NormStats>,
}

impl WindowedDataset {
    /// Builds a dataset over the windows of recordings whose subject passes `keep`.
    ///
    /// `gesture_ids` and `subject_ids` define the one-hot label spaces.
    pub fn build(
        recordings: Arc<Vec<Recording>>,
        params: WindowParams,
        gesture_ids: Vec<u32>,
        subject_ids: Vec<u32>,
        keep: impl Fn(u32) -> bool,
    ) -> Result<(Self, Vec<ShortRecording>)> {
        params.validate()?;
        let channels = check_channels(&recordings)?;
        let (all, short) = window_all(&recordings, params);
        let mut windows = Vec::new();
        let mut info = Vec::new();
        for w in all {
            let r = &recordings[w.recording];
            if !keep(r.subject_id) {
                continue;
            }
            let pattern = gesture_ids.iter().position(|&g| g == r.gesture_id).ok_or_else(|| {
                Error::invalid("gesture_id", format!("gesture {} is not in the label space", r.gesture_id))
            })?;
            info.push(WindowInfo {
                subject_id: r.subject_id,
                gesture_id: r.gesture_id,
                trial_id: r.trial_id,
                start: w.start,
                pattern,
                subject: subject_ids.iter().position(|&s| s == r.subject_id),
            });
            windows.push(w);
        }
        Ok((
            WindowedDataset {
                recordings,
                windows,
                info,
                params,
                channels,
                gesture_ids,
                subject_ids,
                norm: None,
            },
            short,
        ))
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window_params(&self) -> WindowParams {
        self.params
    }

    pub fn gesture_ids(&self) -> &[u32] {
        &self.gesture_ids
    }

    /// Subject label space (training subjects).
    pub fn subject_ids(&self) -> &[u32] {
        &self.subject_ids
    }

    pub fn n_patterns(&self) -> usize {
        self.gesture_ids.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn info(&self, i: usize) -> WindowInfo {
        self.info[i]
    }

    pub fn infos(&self) -> &[WindowInfo] {
        &self.info
    }

    pub fn windows(&self) -> &[WindowRef] {
        &self.windows
    }

    pub fn recordings(&self) -> &[Recording] {
        &self.recordings
    }

    /// Subjects that contribute at least one window, ascending.
    pub fn subjects_present(&self) -> Vec<u32> {
        self.info
            .iter()
            .map(|i| i.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn normalization(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// Statistics over this dataset's own windows.
    pub fn compute_stats(&self) -> Result<NormStats> {
        NormStats::from_windows(&self.recordings, &self.windows, self.params.window)
    }

    /// Standardizes samples with `stats` from now on (pass the training split's).
    pub fn normalize(mut self, stats: NormStats) -> Result<Self> {
        if stats.mean.len() != self.channels || stats.std.len() != self.channels {
            return Err(Error::dim(
                "normalize",
                format!("{} channels vs statistics for {}", self.channels, stats.mean.len()),
            ));
        }
        self.norm = Some(stats);
        Ok(self)
    }

    /// Keeps only the windows at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        WindowedDataset {
            recordings: Arc::clone(&self.recordings),
            windows: indices.iter().map(|&i| self.windows[i]).collect(),
            info: indices.iter().map(|&i| self.info[i]).collect(),
            params: self.params,
            channels: self.channels,
            gesture_ids: self.gesture_ids.clone(),
            subject_ids: self.subject_ids.clone(),
            norm: self.norm.clone(),
        }
    }

    /// Window `i` as an `L × D` tensor, normalized if statistics are set.
    pub fn sample(&self, i: usize) -> Tensor<f32> {
        let mut out = vec![0.0f32; self.params.window * self.channels];
        self.copy_window(i, &mut out);
        Tensor::new(vec![self.params.window, self.channels], out).expect("window shape")
    }

    fn copy_window(&self, i: usize, out: &mut [f32]) {
        let w = self.windows[i];
        let src = self.recordings[w.recording].rows(w.start, self.params.window);
        match &self.norm {
            Some(n) => n.apply(src, out),
            None => out.copy_from_slice(src),
        }
    }

    /// Stacks windows at `indices` into `[N, L, D]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let per = self.params.window * self.channels;
        let mut data = vec![0.0f32; per * indices.len()];
        for (k, &i) in indices.iter().enumerate() {
            self.copy_window(i, &mut data[k * per..(k + 1) * per]);
        }
        Tensor::new(vec![indices.len(), self.params.window, self.channels], data)
    }

    pub fn pattern_one_hot(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let k = self.n_patterns();
        let mut data = vec![0.0f32; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            data[row * k + self.info[i].pattern] = 1.0;
        }
        Tensor::new(vec![indices.len(), k], data)
    }

    /// One-hot subject labels; fails for windows outside the subject label space.
    pub fn subject_one_hot(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let k = self.n_subjects();
        if k == 0 {
            return Err(Error::invalid("subject labels", "dataset has no subject label space"));
        }
        let mut data = vec![0.0f32; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            let s = self.info[i].subject.ok_or_else(|| {
                Error::invalid(
                    "subject labels",
                    format!("subject {} is not a training subject", self.info[i].subject_id),
                )
            })?;
            data[row * k + s] = 1.0;
        }
        Tensor::new(vec![indices.len(), k], data)
    }
}

fn check_channels(recordings: &[Recording]) -> Result<usize> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::invalid("recordings", "no recordings"))?;
    let d = first.channels();
    if let Some(r) = recordings.iter().find(|r| r.channels() != d) {
        return Err(Error::invalid(
            "channels",
            format!(
                "recording s{} g{} t{} has {} channels, expected {d}",
                r.subject_id,
                r.gesture_id,
                r.trial_id,
                r.channels()
            ),
        ));
    }
    Ok(d)
}

/// Sorted distinct gesture ids over all recordings.
pub fn gesture_space(recordings: &[Recording]) -> Vec<u32> {
    recordings
        .iter()
        .map(|r| r.gesture_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Training and test windows of one cross-validation fold.
#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub short_recordings: Vec<ShortRecording>,
}

/// Cuts the windows of `fold`: held-out subjects go to `test`, everyone else
/// to `train`. Subject labels index the training subjects only, and
/// normalization statistics (if enabled) come from training windows only.
pub fn split_fold(
    recordings: Arc<Vec<Recording>>,
    plan: &FoldPlan,
    fold: usize,
    params: WindowParams,
    normalize: bool,
) -> Result<FoldSplit> {
    plan.check_fold(fold)?;
    if let Some(r) = recordings.iter().find(|r| !plan.assignments.contains_key(&r.subject_id)) {
        return Err(Error::invalid(
            "fold plan",
            format!("subject {} has recordings but no fold", r.subject_id),
        ));
    }
    let gestures = gesture_space(&recordings);
    let train_subjects = plan.train_subjects(fold);
    let test_subjects = plan.test_subjects(fold);
    let (train, short) = WindowedDataset::build(
        Arc::clone(&recordings),
        params,
        gestures.clone(),
        train_subjects.clone(),
        |s| train_subjects.contains(&s),
    )?;
    if train.is_empty() {
        return Err(Error::invalid("training split", format!("fold {fold} has no training windows")));
    }
    let (test, _) = WindowedDataset::build(recordings, params, gestures, train_subjects, |s| {
        test_subjects.contains(&s)
    })?;
    let (train, test) = if normalize {
        let stats = train.compute_stats()?;
        (train.normalize(stats.clone())?, test.normalize(stats)?)
    } else {
        (train, test)
    };
    Ok(FoldSplit {
        fold,
        train,
        test,
        short_recordings: short,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::folds::make_folds;

    fn ramp(subject: u32, gesture: u32, t: usize, offset: f32) -> Recording {
        let signal = (0..t * 2)
            .map(|i| if i % 2 == 0 { offset + (i / 2) as f32 } else { 5.0 })
            .collect();
        Recording::new(subject, gesture, 0, 2048.0, 2, signal).unwrap()
    }

    fn fixture() -> Arc<Vec<Recording>> {
        let mut recs = Vec::new();
        for s in 1..=4u32 {
            for g in [7u32, 9] {
                // the held-out subject sits far away from the rest
                let offset = if s == 4 { 1000.0 } else { 0.0 };
                recs.push(ramp(s, g, 30, offset));
            }
        }
        Arc::new(recs)
    }

    #[test]
    fn training_split_is_standardized() {
        let recs = fixture();
        let plan = make_folds(&[1, 2, 3, 4], 4, 0).unwrap();
        let fold = plan.assignments[&4];
        let split = split_fold(recs, &plan, fold, WindowParams { window: 8, step: 3 }, true).unwrap();
        let all: Vec<usize> = (0..split.train.len()).collect();
        let x = split.train.batch(&all).unwrap();
        let (mut m, mut s) = ([0.0f64; 2], [0.0f64; 2]);
        let n = (x.numel() / 2) as f64;
        for row in x.data().chunks(2) {
            for j in 0..2 {
                m[j] += row[j] as f64;
            }
        }
        for row in x.data().chunks(2) {
            for j in 0..2 {
                s[j] += (row[j] as f64 - m[j] / n).powi(2);
            }
        }
        assert!((m[0] / n).abs() < 1e-5);
        assert!(((s[0] / n).sqrt() - 1.0).abs() < 1e-3);
        // constant channel maps to zero
        assert!(x.data().chunks(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn test_split_uses_training_statistics() {
        let recs = fixture();
        let plan = make_folds(&[1, 2, 3, 4], 4, 0).unwrap();
        let fold = plan.assignments[&4];
        let split = split_fold(recs, &plan, fold, WindowParams { window: 8, step: 3 }, true).unwrap();
        assert_eq!(split.test.subjects_present(), vec![4]);
        let all: Vec<usize> = (0..split.test.len()).collect();
        let x = split.test.batch(&all).unwrap();
        let mean: f64 = x.data().iter().step_by(2).map(|&v| v as f64).sum::<f64>() / all.len() as f64 / 8.0;
        assert!(mean > 10.0, "shifted subject should stay shifted, mean {mean}");
        assert_eq!(split.test.normalization(), split.train.normalization());
    }

    #[test]
    fn subject_labels_cover_training_subjects_only() {
        let recs = fixture();
        let plan = make_folds(&[1, 2, 3, 4], 4, 0).unwrap();
        let split = split_fold(recs, &plan, 0, WindowParams { window: 8, step: 4 }, false).unwrap();
        let held_out = plan.test_subjects(0);
        assert_eq!(split.train.subject_ids(), plan.train_subjects(0).as_slice());
        assert!(split.train.infos().iter().all(|i| i.subject.is_some()));
        assert!(split.test.infos().iter().all(|i| i.subject.is_none()));
        assert!(split.train.subjects_present().iter().all(|s| !held_out.contains(s)));
        assert!(split.test.subject_one_hot(&[0]).is_err());
        let y = split.train.subject_one_hot(&[0, 1]).unwrap();
        assert_eq!(y.data().iter().filter(|&&v| v == 1.0).count(), 2);
    }

    #[test]
    fn stats_weight_overlapping_windows() {
        // one channel 0,1,2,3 with windows [0,1,2] and [1,2,3]: values 0,1,1,2,2,3
        let rec = Recording::new(1, 1, 0, 1.0, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let w = [WindowRef { recording: 0, start: 0 }, WindowRef { recording: 0, start: 1 }];
        let st = NormStats::from_windows(&[rec], &w, 3).unwrap();
        assert!((st.mean[0] - 1.5).abs() < 1e-12);
        let var = [0.0f64, 1.0, 1.0, 2.0, 2.0, 3.0].iter().map(|v| (v - 1.5).powi(2)).sum::<f64>() / 6.0;
        assert!((st.std[0] - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mixed_channel_counts_are_rejected() {
        let recs = Arc::new(vec![
            Recording::new(1, 1, 0, 1.0, 2, vec![0.0; 40]).unwrap(),
            Recording::new(2, 1, 0, 1.0, 3, vec![0.0; 60]).unwrap(),
        ]);
        let r = WindowedDataset::build(recs, WindowParams { window: 4, step: 1 }, vec![1], vec![], |_| true);
        assert!(r.is_err());
    }
}
