#ifndef PHPAV_SYNTHETIC_HPP
#define PHPAV_SYNTHETIC_HPP

#include <cmath>
#include <string>
#include <vector>

#include "phpav/array_io.hpp"
#include "phpav/common.hpp"
#include "phpav/rng.hpp"
#include "phpav/tensor.hpp"

// Synthetic audio-visual task generator. Each clip is a pair of token tensors
// ([T, H*W, C] video, [T, L*F, C] audio) whose class signal is a fixed random
// unit direction per (class, modality), broadcast over all tokens, plus i.i.d.
// Gaussian noise. Three label flavors cover the event-classification,
// multi-label-tagging, and question-answering task shapes with one accuracy
// definition (qa pairs fold into composite classes; multi-label uses exact
// subset match).

namespace phpav {

enum class TaskFlavor { single_label_temporal, multi_label, qa_style };

inline std::string flavor_name(TaskFlavor f) {
  switch (f) {
    case TaskFlavor::single_label_temporal: return "single_label_temporal";
    case TaskFlavor::multi_label: return "multi_label";
    case TaskFlavor::qa_style: return "qa_style";
  }
  throw validation_error("unknown flavor");
}

inline TaskFlavor flavor_from_name(const std::string& s) {
  if (s == "single_label_temporal") return TaskFlavor::single_label_temporal;
  if (s == "multi_label") return TaskFlavor::multi_label;
  if (s == "qa_style") return TaskFlavor::qa_style;
  throw validation_error("unknown task flavor: " + s);
}

struct TaskSpec {
  std::string task_id;
  TaskFlavor flavor = TaskFlavor::single_label_temporal;
  int num_classes = 4;
  long clips_train = 600, clips_val = 100, clips_test = 100;
  long time_steps = 5;
  long video_h = 4, video_w = 4;  // spatial grid -> H*W video tokens per frame
  long audio_l = 4, audio_f = 4;  // time-frequency grid -> L*F audio tokens per frame
  long base_channels = 8;
  uint64_t seed = 1;
  double noise_sigma = 0.5;

  long video_tokens() const { return video_h * video_w; }
  long audio_tokens() const { return audio_l * audio_f; }

  void validate() const {
    if (task_id.empty()) throw validation_error("task_id must be non-empty");
    if (num_classes < 2) throw validation_error("num_classes must be >= 2");
    if (clips_train < 1 || clips_val < 0 || clips_test < 1)
      throw validation_error("split sizes must be positive (val may be 0)");
    if (time_steps < 1 || video_h < 1 || video_w < 1 || audio_l < 1 || audio_f < 1 ||
        base_channels < 1)
      throw validation_error("clip dimensions must be positive");
    if (noise_sigma < 0) throw validation_error("noise_sigma must be >= 0");
  }
};

// qa_style composite classes enumerate (question, answer) pairs:
// num_classes = n_q * n_a with n_q the largest divisor <= sqrt(num_classes).
inline int qa_question_count(int num_classes) {
  int best = 1;
  for (int q = 1; q * q <= num_classes; ++q)
    if (num_classes % q == 0) best = q;
  return best;
}

struct AVClip {
  Tensor<float> video;  // [T, H*W, C]
  Tensor<float> audio;  // [T, L*F, C]
  int label = -1;                 // class id (single_label_temporal, qa_style)
  std::vector<int> label_multi;   // multi-hot, size num_classes (multi_label)
  int question_id = -1;           // qa_style only
};

struct TaskDataset {
  TaskSpec spec;
  std::vector<AVClip> train, val, test;

  const std::vector<AVClip>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw validation_error("unknown split: " + name);
  }
};

namespace detail {

template <typename T>
void normalize_vec(std::vector<T>& v) {
  double sq = 0;
  for (T x : v) sq += double(x) * double(x);
  double nr = std::sqrt(sq);
  if (nr < 1e-9) throw validation_error("degenerate class direction");
  for (T& x : v) x = static_cast<T>(x / nr);
}

inline std::vector<std::vector<float>> class_directions(const TaskSpec& spec,
                                                        const std::string& modality) {
  std::vector<std::vector<float>> dirs;
  for (int c = 0; c < spec.num_classes; ++c) {
    Rng r = Rng::derive(spec.seed, "dir:" + spec.task_id + ":" + modality + ":" + std::to_string(c));
    std::vector<float> d(static_cast<size_t>(spec.base_channels));
    for (auto& x : d) x = static_cast<float>(r.normal());
    normalize_vec(d);
    dirs.push_back(std::move(d));
  }
  return dirs;
}

inline void fill_tokens(Tensor<float>& t, const std::vector<float>& signal, double sigma, Rng& rng) {
  long Tn = t.dim(0), S = t.dim(1), C = t.dim(2);
  for (long i = 0; i < Tn * S; ++i)
    for (long c = 0; c < C; ++c)
      t.data[static_cast<size_t>(i * C + c)] =
          signal[static_cast<size_t>(c)] + static_cast<float>(rng.normal() * sigma);
}

}  // namespace detail

inline TaskDataset make_task(const TaskSpec& spec) {
  spec.validate();
  TaskDataset ds;
  ds.spec = spec;
  auto vdirs = detail::class_directions(spec, "video");
  auto adirs = detail::class_directions(spec, "audio");
  const int K = spec.num_classes;
  const int n_a = K / qa_question_count(K);

  auto gen_split = [&](const std::string& split, long count) {
    std::vector<AVClip> clips;
    clips.reserve(static_cast<size_t>(count));
    Rng lab = Rng::derive(spec.seed, "labels:" + spec.task_id + ":" + split);
    Rng noise = Rng::derive(spec.seed, "noise:" + spec.task_id + ":" + split);
    for (long i = 0; i < count; ++i) {
      AVClip clip;
      std::vector<float> vsig(static_cast<size_t>(spec.base_channels), 0.f);
      std::vector<float> asig(static_cast<size_t>(spec.base_channels), 0.f);
      if (spec.flavor == TaskFlavor::multi_label) {
        clip.label_multi.assign(static_cast<size_t>(K), 0);
        int active = 0;
        do {
          active = 0;
          for (int c = 0; c < K; ++c) {
            clip.label_multi[static_cast<size_t>(c)] = lab.uniform() < 0.5 ? 1 : 0;
            active += clip.label_multi[static_cast<size_t>(c)];
          }
        } while (active == 0);
        for (int c = 0; c < K; ++c)
          if (clip.label_multi[static_cast<size_t>(c)])
            for (long d = 0; d < spec.base_channels; ++d) {
              vsig[static_cast<size_t>(d)] += vdirs[static_cast<size_t>(c)][static_cast<size_t>(d)];
              asig[static_cast<size_t>(d)] += adirs[static_cast<size_t>(c)][static_cast<size_t>(d)];
            }
      } else {
        clip.label = static_cast<int>(lab.uniform_int(K));
        if (spec.flavor == TaskFlavor::qa_style) clip.question_id = clip.label / n_a;
        vsig = vdirs[static_cast<size_t>(clip.label)];
        asig = adirs[static_cast<size_t>(clip.label)];
      }
      clip.video = Tensor<float>({spec.time_steps, spec.video_tokens(), spec.base_channels});
      clip.audio = Tensor<float>({spec.time_steps, spec.audio_tokens(), spec.base_channels});
      detail::fill_tokens(clip.video, vsig, spec.noise_sigma, noise);
      detail::fill_tokens(clip.audio, asig, spec.noise_sigma, noise);
      clips.push_back(std::move(clip));
    }
    return clips;
  };

  ds.train = gen_split("train", spec.clips_train);
  ds.val = gen_split("val", spec.clips_val);
  ds.test = gen_split("test", spec.clips_test);
  return ds;
}

// Orthonormal per-class embedding rows, shared by both modalities' text
// targets. Requires dim >= num_classes (Gram-Schmidt of Gaussian rows).
inline Tensor<float> class_text_embeddings(const TaskSpec& spec, long dim) {
  if (dim < spec.num_classes)
    throw validation_error("class_text_embeddings: dim " + std::to_string(dim) +
                           " < num_classes " + std::to_string(spec.num_classes));
  Rng r = Rng::derive(spec.seed, "text:" + spec.task_id);
  Tensor<float> e({spec.num_classes, dim});
  for (int c = 0; c < spec.num_classes; ++c) {
    // draw, project out previous rows, normalize; retry on degeneracy
    for (int attempt = 0;; ++attempt) {
      std::vector<double> v(static_cast<size_t>(dim));
      for (auto& x : v) x = r.normal();
      for (int p = 0; p < c; ++p) {
        double dot = 0;
        for (long d = 0; d < dim; ++d) dot += v[static_cast<size_t>(d)] * e.at(p, d);
        for (long d = 0; d < dim; ++d) v[static_cast<size_t>(d)] -= dot * e.at(p, d);
      }
      double sq = 0;
      for (double x : v) sq += x * x;
      double nr = std::sqrt(sq);
      if (nr > 1e-6) {
        for (long d = 0; d < dim; ++d) e.at(c, d) = static_cast<float>(v[static_cast<size_t>(d)] / nr);
        break;
      }
      if (attempt > 16) throw validation_error("class_text_embeddings: degenerate basis");
    }
  }
  return e;
}

// Training-time text target for one clip's label. Single-label and qa flavors
// use the class row directly. Multi-label uses the L2-normalized SIGNED
// mixture sum_c (2*y_c - 1) e_c, so that the threshold-at-zero prediction rule
// is calibrated: inactive classes train toward negative logits.
inline Tensor<float> label_target_embedding(const TaskSpec& spec, const AVClip& clip,
                                            const Tensor<float>& class_emb) {
  long dim = class_emb.dim(1);
  Tensor<float> t({1, dim});
  if (spec.flavor == TaskFlavor::multi_label) {
    if (static_cast<int>(clip.label_multi.size()) != spec.num_classes)
      throw validation_error("label_target_embedding: bad multi-hot length");
    for (int c = 0; c < spec.num_classes; ++c) {
      float s = clip.label_multi[static_cast<size_t>(c)] ? 1.f : -1.f;
      for (long d = 0; d < dim; ++d) t.at(0, d) += s * class_emb.at(c, d);
    }
    double sq = 0;
    for (long d = 0; d < dim; ++d) sq += double(t.at(0, d)) * t.at(0, d);
    double nr = std::sqrt(sq);
    for (long d = 0; d < dim; ++d) t.at(0, d) = static_cast<float>(t.at(0, d) / nr);
  } else {
    if (clip.label < 0 || clip.label >= spec.num_classes)
      throw validation_error("label_target_embedding: label out of range");
    for (long d = 0; d < dim; ++d) t.at(0, d) = class_emb.at(clip.label, d);
  }
  return t;
}

// ----- persistence -----
// <dir>/<task_id>/manifest.json plus one array file per (split, stream).
// Labels are stored as float32 arrays: [N,1] class ids (plus [N,1] question
// ids for qa_style) or [N,K] multi-hot.

namespace detail {

inline nlohmann::json spec_to_json(const TaskSpec& s) {
  return nlohmann::json{{"task_id", s.task_id},
                        {"flavor", flavor_name(s.flavor)},
                        {"num_classes", s.num_classes},
                        {"clips_train", s.clips_train},
                        {"clips_val", s.clips_val},
                        {"clips_test", s.clips_test},
                        {"time_steps", s.time_steps},
                        {"video_h", s.video_h},
                        {"video_w", s.video_w},
                        {"audio_l", s.audio_l},
                        {"audio_f", s.audio_f},
                        {"base_channels", s.base_channels},
                        {"seed", s.seed},
                        {"noise_sigma", s.noise_sigma}};
}

inline TaskSpec spec_from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.task_id = j.at("task_id").get<std::string>();
  s.flavor = flavor_from_name(j.at("flavor").get<std::string>());
  s.num_classes = j.at("num_classes").get<int>();
  s.clips_train = j.at("clips_train").get<long>();
  s.clips_val = j.at("clips_val").get<long>();
  s.clips_test = j.at("clips_test").get<long>();
  s.time_steps = j.at("time_steps").get<long>();
  s.video_h = j.at("video_h").get<long>();
  s.video_w = j.at("video_w").get<long>();
  s.audio_l = j.at("audio_l").get<long>();
  s.audio_f = j.at("audio_f").get<long>();
  s.base_channels = j.at("base_channels").get<long>();
  s.seed = j.at("seed").get<uint64_t>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  return s;
}

template <typename Fn>
void for_each_split(const TaskDataset& ds, Fn fn) {
  fn("train", ds.train);
  fn("val", ds.val);
  fn("test", ds.test);
}

inline Tensor<float> pack_clips(const std::vector<AVClip>& clips, bool video) {
  if (clips.empty()) return Tensor<float>({0});
  const Tensor<float>& first = video ? clips[0].video : clips[0].audio;
  long N = static_cast<long>(clips.size());
  Tensor<float> out({N, first.dim(0), first.dim(1), first.dim(2)});
  long stride = first.numel();
  for (long i = 0; i < N; ++i) {
    const Tensor<float>& t = video ? clips[static_cast<size_t>(i)].video : clips[static_cast<size_t>(i)].audio;
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + i * stride);
  }
  return out;
}

inline Tensor<float> pack_labels(const TaskSpec& spec, const std::vector<AVClip>& clips) {
  long N = static_cast<long>(clips.size());
  if (spec.flavor == TaskFlavor::multi_label) {
    Tensor<float> out({N, spec.num_classes});
    for (long i = 0; i < N; ++i)
      for (int c = 0; c < spec.num_classes; ++c)
        out.at(i, c) = static_cast<float>(clips[static_cast<size_t>(i)].label_multi[static_cast<size_t>(c)]);
    return out;
  }
  Tensor<float> out({N, 1});
  for (long i = 0; i < N; ++i) out.at(i, 0) = static_cast<float>(clips[static_cast<size_t>(i)].label);
  return out;
}

}  // namespace detail

inline void save_dataset(const TaskDataset& ds, const fs::path& root) {
  fs::path dir = root / ds.spec.task_id;
  fs::create_directories(dir);
  nlohmann::json arrays = nlohmann::json::object();
  detail::for_each_split(ds, [&](const std::string& split, const std::vector<AVClip>& clips) {
    if (clips.empty()) return;
    auto video = detail::pack_clips(clips, true);
    auto audio = detail::pack_clips(clips, false);
    auto labels = detail::pack_labels(ds.spec, clips);
    for (auto& [name, t] : std::initializer_list<std::pair<std::string, Tensor<float>*>>{
             {split + "_video", &video}, {split + "_audio", &audio}, {split + "_labels", &labels}}) {
      write_array(dir / (name + ".bin"), *t);
      arrays[name] = {{"file", name + ".bin"}, {"shape", t->shape}, {"digest", array_digest(*t)}};
    }
    if (ds.spec.flavor == TaskFlavor::qa_style) {
      Tensor<float> q({static_cast<long>(clips.size()), 1});
      for (long i = 0; i < q.dim(0); ++i) q.at(i, 0) = static_cast<float>(clips[static_cast<size_t>(i)].question_id);
      write_array(dir / (split + "_questions.bin"), q);
      arrays[split + "_questions"] = {
          {"file", split + "_questions.bin"}, {"shape", q.shape}, {"digest", array_digest(q)}};
    }
  });
  nlohmann::json manifest{{"format_version", 1},
                          {"spec", detail::spec_to_json(ds.spec)},
                          {"arrays", arrays}};
  write_json(dir / "manifest.json", manifest);
}

inline TaskDataset load_dataset(const fs::path& root, const std::string& task_id) {
  fs::path dir = root / task_id;
  nlohmann::json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format_version", 0) != 1)
    throw io_error("unsupported dataset format_version in " + (dir / "manifest.json").string());
  TaskDataset ds;
  ds.spec = detail::spec_from_json(manifest.at("spec"));
  if (ds.spec.task_id != task_id)
    throw io_error("dataset manifest task_id mismatch in " + dir.string());

  auto load_split = [&](const std::string& split, long count) {
    std::vector<AVClip> clips(static_cast<size_t>(count));
    if (count == 0) return clips;
    auto fetch = [&](const std::string& name) {
      const auto& entry = manifest.at("arrays").at(name);
      Tensor<float> t = read_array<float>(dir / entry.at("file").get<std::string>());
      auto want = entry.at("shape").get<std::vector<long>>();
      if (t.shape != want)
        throw io_error("array '" + name + "' shape mismatch vs manifest in " + dir.string());
      if (array_digest(t) != entry.at("digest").get<std::string>())
        throw io_error("array '" + name + "' digest mismatch in " + dir.string());
      return t;
    };
    Tensor<float> video = fetch(split + "_video");
    Tensor<float> audio = fetch(split + "_audio");
    Tensor<float> labels = fetch(split + "_labels");
    if (video.dim(0) != count || audio.dim(0) != count || labels.dim(0) != count)
      throw io_error("split '" + split + "' count mismatch in " + dir.string());
    Tensor<float> questions;
    if (ds.spec.flavor == TaskFlavor::qa_style) questions = fetch(split + "_questions");
    long vstride = video.numel() / count, astride = audio.numel() / count;
    for (long i = 0; i < count; ++i) {
      AVClip& c = clips[static_cast<size_t>(i)];
      c.video = Tensor<float>({video.dim(1), video.dim(2), video.dim(3)});
      c.audio = Tensor<float>({audio.dim(1), audio.dim(2), audio.dim(3)});
      std::copy(video.data.begin() + i * vstride, video.data.begin() + (i + 1) * vstride,
                c.video.data.begin());
      std::copy(audio.data.begin() + i * astride, audio.data.begin() + (i + 1) * astride,
                c.audio.data.begin());
      if (ds.spec.flavor == TaskFlavor::multi_label) {
        c.label_multi.resize(static_cast<size_t>(ds.spec.num_classes));
        for (int k = 0; k < ds.spec.num_classes; ++k)
          c.label_multi[static_cast<size_t>(k)] = static_cast<int>(labels.at(i, k));
      } else {
        c.label = static_cast<int>(labels.at(i, 0));
        if (ds.spec.flavor == TaskFlavor::qa_style) c.question_id = static_cast<int>(questions.at(i, 0));
      }
    }
    return clips;
  };
  ds.train = load_split("train", ds.spec.clips_train);
  ds.val = load_split("val", ds.spec.clips_val);
  ds.test = load_split("test", ds.spec.clips_test);
  return ds;
}

}  // namespace phpav

#endif
