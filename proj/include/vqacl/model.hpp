#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "vqacl/attention.hpp"
#include "vqacl/encoders.hpp"
#include "vqacl/ops.hpp"
#include "vqacl/spatial_transformer.hpp"
#include "vqacl/synth.hpp"

namespace vqacl {

static_assert(std::endian::native == std::endian::little,
              "model serialization assumes a little-endian host");

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

enum class FusionMode { kProduct = 0, kSum, kConcat };

inline const char* fusion_name(FusionMode f) {
  static constexpr const char* names[3] = {"product", "sum", "concat"};
  return names[static_cast<int>(f)];
}

inline FusionMode parse_fusion(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (s == fusion_name(static_cast<FusionMode>(i))) return static_cast<FusionMode>(i);
  throw std::runtime_error("unknown fusion mode '" + s + "'");
}

struct ModelConfig {
  int image_size = 64;
  ImageEncoderConfig image_enc;
  TextEncoderConfig text_enc;
  double scale_max = 1.5;
  FusionMode fusion = FusionMode::kProduct;
  bool uniform_attention = false;   // ablation: soft attention forced uniform
  bool identity_transform = false;  // ablation: spatial transforms forced identity

  int feature_channels() const { return image_enc.out_channels(); }

  void validate() const {
    if (image_size % image_enc.total_downsampling() != 0)
      throw std::invalid_argument("model config: image size not divisible by downsampling");
    if (feature_channels() % 2 != 0)
      throw std::invalid_argument("model config: feature channels must be even");
    const int spatial = image_size / image_enc.total_downsampling();
    if (spatial < 2) throw std::invalid_argument("model config: feature map smaller than 2x2");
  }
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct ForwardResult {
  Tensor logits;             // N x num_answers
  Tensor attention_weights;  // N x P x P
  Tensor theta1, theta2;     // N x 4
};

class VqaModel {
 public:
  ModelConfig config;
  Vocabulary vocab;                  // question tokens
  std::vector<std::string> answers;  // class index -> answer token

  ImageEncoderParams image_enc;
  TextEncoderParams text_enc;
  CrossAttentionParams attention;
  SpatialTransformerParams transform;
  Tensor fuse_vis_w, fuse_vis_b;    // 3C -> L
  Tensor fuse_lang_w, fuse_lang_b;  // L -> L
  Tensor cls1_w, cls1_b;            // fused -> L
  Tensor cls2_w, cls2_b;            // L -> num_answers

  static VqaModel init(const ModelConfig& cfg, Vocabulary vocab,
                       std::vector<std::string> answers, std::uint64_t seed) {
    cfg.validate();
    if (answers.empty()) throw std::invalid_argument("model: empty answer vocabulary");
    VqaModel m;
    m.config = cfg;
    m.vocab = std::move(vocab);
    m.answers = std::move(answers);
    Rng rng(hash_key(seed, 0x30d31));
    const int c = cfg.feature_channels();
    const int l = cfg.text_enc.hidden_dim;
    m.image_enc = ImageEncoderParams::init(cfg.image_enc, rng);
    m.text_enc = TextEncoderParams::init(m.vocab.size(), cfg.text_enc, rng);
    m.attention = CrossAttentionParams::init(c, c, l, rng);
    m.transform = SpatialTransformerParams::init(c, cfg.scale_max);
    m.fuse_vis_w = uniform_init({l, 3 * c}, 3 * c, l, rng);
    m.fuse_vis_b = Tensor({l});
    m.fuse_lang_w = uniform_init({l, l}, l, l, rng);
    m.fuse_lang_b = Tensor({l});
    const int fused_dim = cfg.fusion == FusionMode::kConcat ? 2 * l : l;
    m.cls1_w = uniform_init({l, fused_dim}, fused_dim, l, rng);
    m.cls1_b = Tensor({l});
    const int k = static_cast<int>(m.answers.size());
    m.cls2_w = uniform_init({k, l}, l, k, rng);
    m.cls2_b = Tensor({k});
    return m;
  }

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    image_enc.collect("image_encoder", out);
    text_enc.collect("text_encoder", out);
    attention.collect("attention", out);
    transform.collect("transform", out);
    out.emplace_back("fusion/vis_w", &fuse_vis_w);
    out.emplace_back("fusion/vis_b", &fuse_vis_b);
    out.emplace_back("fusion/lang_w", &fuse_lang_w);
    out.emplace_back("fusion/lang_b", &fuse_lang_b);
    out.emplace_back("classifier/w1", &cls1_w);
    out.emplace_back("classifier/b1", &cls1_b);
    out.emplace_back("classifier/w2", &cls2_w);
    out.emplace_back("classifier/b2", &cls2_b);
    return out;
  }

  void watch_all(Tape& tape) {
    for (auto& [name, t] : named_params()) tape.watch(*t);
  }

  int answer_index(const std::string& answer) const {
    for (std::size_t i = 0; i < answers.size(); ++i)
      if (answers[i] == answer) return static_cast<int>(i);
    throw std::runtime_error("model: answer '" + answer + "' not in answer vocabulary");
  }

  // Pooled multi-level visual features fused with the language projection,
  // then a two-layer classifier head.
  ForwardResult forward(Tape& tape, const Tensor& images,
                        const std::vector<std::vector<int>>& tokens) const {
    Tensor f_x = encode_image(tape, images, image_enc, config.image_enc);
    Tensor v_q = encode_question(tape, tokens, text_enc, config.text_enc);

    CrossModalProjection proj = project_cross_modal(tape, f_x, v_q, attention);
    Tensor query = attention_query(tape, proj, attention);
    AttendedFeature att = attend(tape, query, proj, f_x, attention,
                                 config.uniform_attention);
    TransformedFeatures st = transform_features(tape, proj, f_x, transform,
                                                config.identity_transform);

    Tensor pooled = concat_cols(tape, {global_avg_pool(tape, att.output),
                                       global_avg_pool(tape, st.first),
                                       global_avg_pool(tape, st.second)});
    Tensor vis = linear(tape, pooled, fuse_vis_w, fuse_vis_b);
    Tensor lang = linear(tape, v_q, fuse_lang_w, fuse_lang_b);

    Tensor fused;
    switch (config.fusion) {
      case FusionMode::kProduct: fused = mul(tape, vis, lang); break;
      case FusionMode::kSum: fused = add(tape, vis, lang); break;
      case FusionMode::kConcat: fused = concat_cols(tape, {vis, lang}); break;
    }

    Tensor hidden = relu(tape, linear(tape, fused, cls1_w, cls1_b));
    ForwardResult out;
    out.logits = linear(tape, hidden, cls2_w, cls2_b);
    out.attention_weights = att.weights;
    out.theta1 = st.theta1;
    out.theta2 = st.theta2;
    return out;
  }
};

// per-sample cross-entropy losses, shape N
inline Tensor sample_losses(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy(tape, logits, labels);
}

// single-sample convenience
inline double sample_loss(const Tensor& logits_row, int label) {
  Tape tape(Tape::Mode::kNoGrad);
  Tensor row = logits_row.ndim() == 1
                   ? logits_row.reshaped({1, logits_row.dim(0)})
                   : logits_row;
  return cross_entropy(tape, row, {label}).at(0);
}

// ---------------------------------------------------------------------------
// batches and evaluation
// ---------------------------------------------------------------------------

// question vocabulary from the training split only
inline Vocabulary build_train_vocab(const Dataset& ds) {
  std::vector<std::string> questions;
  for (int idx : ds.split_triplets(Split::kTrain))
    questions.push_back(ds.triplets[static_cast<std::size_t>(idx)].question);
  return Vocabulary::build(questions);
}

struct BatchInputs {
  Tensor images;                        // N x 3 x S x S in [0,1]
  std::vector<std::vector<int>> tokens; // token ids per sample
  std::vector<int> labels;              // answer class per sample
};

inline BatchInputs make_batch(const VqaModel& model, const Dataset& ds,
                              const std::vector<int>& triplet_idx, std::size_t begin,
                              std::size_t end) {
  BatchInputs batch;
  std::vector<const std::uint8_t*> imgs;
  for (std::size_t i = begin; i < end; ++i) {
    const Triplet& t = ds.triplets[static_cast<std::size_t>(triplet_idx[i])];
    imgs.push_back(ds.image_bytes(t.scene_id).data());
    batch.tokens.push_back(model.vocab.encode(tokenize(t.question)));
    batch.labels.push_back(model.answer_index(t.answer));
  }
  batch.images = images_to_tensor(imgs, ds.image_size);
  return batch;
}

struct MetricsReport {
  struct TypeStat {
    int correct = 0;
    int total = 0;
    double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
  };
  std::map<QuestionType, TypeStat> per_type;  // types with zero samples are absent
  int correct = 0;
  int total = 0;

  double overall_accuracy() const {
    return total ? static_cast<double>(correct) / total : 0.0;
  }

  // unweighted mean over types that appear; empty types are excluded
  double average_accuracy() const {
    if (per_type.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& [t, stat] : per_type) sum += stat.accuracy();
    return sum / static_cast<double>(per_type.size());
  }
};

inline int argmax_row(const double* row, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (row[i] > row[best]) best = i;  // ties keep the lowest index
  return best;
}

// Argmax predictions over a split; deterministic iteration order. With
// threads > 1 the split is sharded into contiguous ranges and the integer
// tallies merged in shard order.
inline MetricsReport evaluate(const VqaModel& model, const Dataset& ds,
                              const std::vector<int>& triplet_idx, int batch_size = 64,
                              int threads = 1) {
  if (triplet_idx.empty()) throw std::invalid_argument("evaluate: empty split");
  const int k = static_cast<int>(model.answers.size());

  auto run_range = [&](std::size_t lo, std::size_t hi, MetricsReport& report) {
    for (std::size_t begin = lo; begin < hi; begin += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(hi, begin + static_cast<std::size_t>(batch_size));
      BatchInputs batch = make_batch(model, ds, triplet_idx, begin, end);
      Tape tape(Tape::Mode::kNoGrad);
      ForwardResult fwd = model.forward(tape, batch.images, batch.tokens);
      const double* logits = fwd.logits.data();
      for (std::size_t i = begin; i < end; ++i) {
        const Triplet& t = ds.triplets[static_cast<std::size_t>(triplet_idx[i])];
        const int pred = argmax_row(logits + static_cast<std::int64_t>(i - begin) * k, k);
        MetricsReport::TypeStat& stat = report.per_type[t.type];
        ++stat.total;
        ++report.total;
        if (pred == batch.labels[i - begin]) {
          ++stat.correct;
          ++report.correct;
        }
      }
    }
  };

  if (threads <= 1) {
    MetricsReport report;
    run_range(0, triplet_idx.size(), report);
    return report;
  }

  const std::size_t n = triplet_idx.size();
  const std::size_t n_shards = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<MetricsReport> partial(n_shards);
  std::vector<std::thread> pool;
  for (std::size_t s = 0; s < n_shards; ++s) {
    const std::size_t lo = n * s / n_shards;
    const std::size_t hi = n * (s + 1) / n_shards;
    pool.emplace_back([&, s, lo, hi] { run_range(lo, hi, partial[s]); });
  }
  for (std::thread& t : pool) t.join();
  MetricsReport report;
  for (const MetricsReport& p : partial) {
    report.correct += p.correct;
    report.total += p.total;
    for (const auto& [type, stat] : p.per_type) {
      report.per_type[type].correct += stat.correct;
      report.per_type[type].total += stat.total;
    }
  }
  return report;
}

// CSV rows (type, accuracy) plus average and overall accuracy rows.
inline std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "type,accuracy\n";
  char buf[64];
  for (const auto& [type, stat] : report.per_type) {
    std::snprintf(buf, sizeof(buf), "%.17g", stat.accuracy());
    os << type_name(type) << ',' << buf << '\n';
  }
  std::snprintf(buf, sizeof(buf), "%.17g", report.average_accuracy());
  os << "average_accuracy," << buf << '\n';
  std::snprintf(buf, sizeof(buf), "%.17g", report.overall_accuracy());
  os << "overall_accuracy," << buf << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// serialization: magic, text manifest (key dtype shape), raw little-endian
// f64 payloads in manifest order. Vocabularies and config travel as f64-coded
// byte tensors under meta/ keys so the whole model round-trips from one file.
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[9] = "SPCLVQA1";

namespace detail {

inline Tensor encode_text_tensor(const std::string& text) {
  Tensor t({static_cast<int>(text.size())});
  double* d = t.mutable_data();
  for (std::size_t i = 0; i < text.size(); ++i)
    d[i] = static_cast<double>(static_cast<unsigned char>(text[i]));
  return t;
}

inline std::string decode_text_tensor(const Tensor& t) {
  std::string s;
  s.reserve(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    s.push_back(static_cast<char>(static_cast<unsigned char>(t.at(i))));
  return s;
}

inline Tensor encode_config_tensor(const ModelConfig& cfg, int num_answers, int vocab_size) {
  std::vector<double> v;
  v.push_back(1.0);  // format version
  v.push_back(cfg.image_size);
  v.push_back(static_cast<double>(cfg.image_enc.channels.size()));
  for (int c : cfg.image_enc.channels) v.push_back(c);
  for (int s : cfg.image_enc.strides) v.push_back(s);
  v.push_back(cfg.text_enc.embed_dim);
  v.push_back(cfg.text_enc.hidden_dim);
  v.push_back(cfg.text_enc.max_tokens);
  v.push_back(cfg.scale_max);
  v.push_back(static_cast<double>(cfg.fusion));
  v.push_back(cfg.uniform_attention ? 1.0 : 0.0);
  v.push_back(cfg.identity_transform ? 1.0 : 0.0);
  v.push_back(num_answers);
  v.push_back(vocab_size);
  return Tensor({static_cast<int>(v.size())}, std::move(v));
}

inline ModelConfig decode_config_tensor(const Tensor& t, int& num_answers, int& vocab_size) {
  std::size_t i = 0;
  auto next = [&]() {
    if (i >= static_cast<std::size_t>(t.numel()))
      throw std::runtime_error("model file: truncated config record");
    return t.at(static_cast<std::int64_t>(i++));
  };
  const int version = static_cast<int>(next());
  if (version != 1) throw std::runtime_error("model file: version mismatch");
  ModelConfig cfg;
  cfg.image_size = static_cast<int>(next());
  const int blocks = static_cast<int>(next());
  cfg.image_enc.channels.resize(static_cast<std::size_t>(blocks));
  cfg.image_enc.strides.resize(static_cast<std::size_t>(blocks));
  for (int b = 0; b < blocks; ++b) cfg.image_enc.channels[static_cast<std::size_t>(b)] = static_cast<int>(next());
  for (int b = 0; b < blocks; ++b) cfg.image_enc.strides[static_cast<std::size_t>(b)] = static_cast<int>(next());
  cfg.text_enc.embed_dim = static_cast<int>(next());
  cfg.text_enc.hidden_dim = static_cast<int>(next());
  cfg.text_enc.max_tokens = static_cast<int>(next());
  cfg.scale_max = next();
  cfg.fusion = static_cast<FusionMode>(static_cast<int>(next()));
  cfg.uniform_attention = next() != 0.0;
  cfg.identity_transform = next() != 0.0;
  num_answers = static_cast<int>(next());
  vocab_size = static_cast<int>(next());
  return cfg;
}

}  // namespace detail

inline void save_model(VqaModel& model, const std::filesystem::path& path) {
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.emplace_back("meta/config",
                       detail::encode_config_tensor(model.config,
                                                    static_cast<int>(model.answers.size()),
                                                    model.vocab.size()));
  entries.emplace_back("meta/question_vocab",
                       detail::encode_text_tensor(model.vocab.serialize()));
  std::string answers;
  for (std::size_t i = 0; i < model.answers.size(); ++i) {
    if (i) answers += '\n';
    answers += model.answers[i];
  }
  entries.emplace_back("meta/answers", detail::encode_text_tensor(answers));
  for (auto& [name, t] : model.named_params()) entries.emplace_back(name, *t);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write model file " + path.string());
  f.write(kModelMagic, 8);
  for (const auto& [name, t] : entries) {
    f << name << '\t' << "f64";
    for (int d : t.shape()) f << '\t' << d;
    f << '\n';
  }
  f << '\n';
  for (const auto& [name, t] : entries)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())));
  if (!f) throw std::runtime_error("short write to model file " + path.string());
}

inline VqaModel load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open model file " + path.string());
  char magic[8];
  f.read(magic, 8);
  if (f.gcount() != 8) throw std::runtime_error("model file: bad magic (truncated)");
  if (std::memcmp(magic, kModelMagic, 7) != 0)
    throw std::runtime_error("model file: bad magic");
  if (magic[7] != kModelMagic[7]) throw std::runtime_error("model file: version mismatch");

  struct Entry {
    std::string key;
    Shape shape;
  };
  std::vector<Entry> manifest;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) break;
    const auto fields = detail::split_tabs(line);
    if (fields.size() < 2 || fields[1] != "f64")
      throw std::runtime_error("model file: malformed manifest line '" + line + "'");
    Entry e;
    e.key = fields[0];
    for (std::size_t i = 2; i < fields.size(); ++i) e.shape.push_back(std::stoi(fields[i]));
    manifest.push_back(std::move(e));
  }
  if (manifest.empty()) throw std::runtime_error("model file: empty manifest");

  std::map<std::string, Tensor> tensors;
  for (const Entry& e : manifest) {
    Tensor t(e.shape);
    f.read(reinterpret_cast<char*>(t.mutable_data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())));
    if (f.gcount() != static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t.numel())))
      throw std::runtime_error("model file: truncated payload at key " + e.key);
    tensors.emplace(e.key, std::move(t));
  }

  auto fetch = [&](const std::string& key) -> const Tensor& {
    const auto it = tensors.find(key);
    if (it == tensors.end())
      throw std::runtime_error("model file: missing key " + key);
    return it->second;
  };

  int num_answers = 0, vocab_size = 0;
  const ModelConfig cfg =
      detail::decode_config_tensor(fetch("meta/config"), num_answers, vocab_size);

  VqaModel model;
  model.config = cfg;
  model.vocab = Vocabulary::parse(detail::decode_text_tensor(fetch("meta/question_vocab")));
  if (model.vocab.size() != vocab_size)
    throw std::runtime_error("model file: shape mismatch for key meta/question_vocab");
  {
    const std::string text = detail::decode_text_tensor(fetch("meta/answers"));
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      model.answers.push_back(text.substr(pos, end - pos));
      pos = end + 1;
    }
    if (static_cast<int>(model.answers.size()) != num_answers)
      throw std::runtime_error("model file: shape mismatch for key meta/answers");
  }

  // materialize parameters at their declared shapes, then verify each against
  // the architecture implied by the config
  VqaModel expect = VqaModel::init(cfg, model.vocab, model.answers, 0);
  model.image_enc = expect.image_enc;
  model.text_enc = expect.text_enc;
  model.attention = expect.attention;
  model.transform = expect.transform;
  model.fuse_vis_w = expect.fuse_vis_w;
  model.fuse_vis_b = expect.fuse_vis_b;
  model.fuse_lang_w = expect.fuse_lang_w;
  model.fuse_lang_b = expect.fuse_lang_b;
  model.cls1_w = expect.cls1_w;
  model.cls1_b = expect.cls1_b;
  model.cls2_w = expect.cls2_w;
  model.cls2_b = expect.cls2_b;
  for (auto& [name, t] : model.named_params()) {
    const Tensor& loaded = fetch(name);
    if (loaded.shape() != t->shape())
      throw std::runtime_error("model file: shape mismatch for key " + name);
    *t = loaded;
  }
  return model;
}

}  // namespace vqacl
