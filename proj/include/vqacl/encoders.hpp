#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/logging.hpp"
#include "vqacl/ops.hpp"
#include "vqacl/rng.hpp"
#include "vqacl/tensor.hpp"

namespace vqacl {

// ---------------------------------------------------------------------------
// text side
// ---------------------------------------------------------------------------

// lowercase, strip punctuation, split on whitespace
inline std::vector<std::string> tokenize(const std::string& question) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : question) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      if (!cur.empty()) {
        tokens.push_back(cur);
        cur.clear();
      }
    } else if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
    // punctuation is dropped
  }
  if (!cur.empty()) tokens.push_back(cur);
  if (tokens.empty()) throw std::invalid_argument("tokenize: empty question");
  return tokens;
}

// token -> index map with reserved 0 = padding, 1 = unknown. Indices are
// assigned in lexicographic token order, so the mapping is a pure function
// of the corpus.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;

  Vocabulary() = default;

  static Vocabulary build(const std::vector<std::string>& questions) {
    std::set<std::string> unique;
    for (const std::string& q : questions)
      for (const std::string& tok : tokenize(q)) unique.insert(tok);
    Vocabulary v;
    int next = 2;
    for (const std::string& tok : unique) v.index_.emplace(tok, next++);
    return v;
  }

  static Vocabulary from_entries(const std::vector<std::pair<std::string, int>>& entries) {
    Vocabulary v;
    for (const auto& [tok, idx] : entries) {
      if (idx < 2) throw std::invalid_argument("vocabulary: reserved index in entries");
      v.index_.emplace(tok, idx);
    }
    return v;
  }

  int lookup(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnknown : it->second;
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const std::string& t : tokens) ids.push_back(lookup(t));
    return ids;
  }

  // total index space including the two reserved slots
  int size() const { return static_cast<int>(index_.size()) + 2; }

  const std::map<std::string, int>& entries() const { return index_; }

  bool operator==(const Vocabulary& other) const { return index_ == other.index_; }

  // sorted "token<TAB>index" lines
  std::string serialize() const {
    std::string out;
    for (const auto& [tok, idx] : index_) {
      out += tok;
      out += '\t';
      out += std::to_string(idx);
      out += '\n';
    }
    return out;
  }

  static Vocabulary parse(const std::string& text) {
    Vocabulary v;
    std::size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      const std::string line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      if (tab == std::string::npos)
        throw std::runtime_error("vocabulary: malformed line " + std::to_string(line_no));
      v.index_.emplace(line.substr(0, tab), std::stoi(line.substr(tab + 1)));
    }
    return v;
  }

 private:
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------

inline Tensor uniform_init(Shape shape, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(std::move(shape));
  double* d = t.mutable_data();
  for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = rng.next_uniform(-limit, limit);
  return t;
}

// fan-in scaled init, suited to relu stacks
inline Tensor he_init(Shape shape, int fan_in, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  double* d = t.mutable_data();
  for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = rng.next_uniform(-limit, limit);
  return t;
}

// ---------------------------------------------------------------------------
// question encoder: embedding + single-layer gated recurrent unit
// ---------------------------------------------------------------------------

struct TextEncoderConfig {
  int embed_dim = 32;
  int hidden_dim = 128;  // language feature dimension L
  int max_tokens = 20;
};

struct TextEncoderParams {
  Tensor embedding;  // V x E
  Tensor w_input;    // 3L x E   gates (r, z, n) stacked
  Tensor w_hidden;   // 3L x L
  Tensor b_input;    // 3L
  Tensor b_hidden;   // 3L

  static TextEncoderParams init(int vocab_size, const TextEncoderConfig& cfg, Rng& rng) {
    TextEncoderParams p;
    const int e = cfg.embed_dim, l = cfg.hidden_dim;
    p.embedding = uniform_init({vocab_size, e}, e, e, rng);
    p.w_input = uniform_init({3 * l, e}, e, l, rng);
    p.w_hidden = uniform_init({3 * l, l}, l, l, rng);
    p.b_input = Tensor({3 * l});
    p.b_hidden = Tensor({3 * l});
    return p;
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + "/embedding", &embedding);
    out.emplace_back(prefix + "/w_input", &w_input);
    out.emplace_back(prefix + "/w_hidden", &w_hidden);
    out.emplace_back(prefix + "/b_input", &b_input);
    out.emplace_back(prefix + "/b_hidden", &b_hidden);
  }

  void watch_all(Tape& tape) {
    tape.watch(embedding);
    tape.watch(w_input);
    tape.watch(w_hidden);
    tape.watch(b_input);
    tape.watch(b_hidden);
  }
};

// token id sequences -> N x L language features (final hidden state)
inline Tensor encode_question(Tape& tape, const std::vector<std::vector<int>>& token_ids,
                              const TextEncoderParams& params, const TextEncoderConfig& cfg) {
  const int n = static_cast<int>(token_ids.size());
  if (n == 0) throw std::invalid_argument("encode_question: empty batch");
  std::vector<std::vector<int>> ids = token_ids;
  for (std::vector<int>& seq : ids) {
    if (seq.empty()) throw std::invalid_argument("encode_question: empty token list");
    if (static_cast<int>(seq.size()) > cfg.max_tokens) {
      log_warning("question truncated from " + std::to_string(seq.size()) + " to " +
                  std::to_string(cfg.max_tokens) + " tokens");
      seq.resize(static_cast<std::size_t>(cfg.max_tokens));
    }
  }
  int steps = 0;
  for (const std::vector<int>& seq : ids)
    steps = std::max(steps, static_cast<int>(seq.size()));

  const int l = cfg.hidden_dim;
  Tensor h({n, l});  // zero initial state, constant
  for (int t = 0; t < steps; ++t) {
    std::vector<int> col(static_cast<std::size_t>(n), Vocabulary::kPad);
    Tensor mask({n, 1});
    double* pm = mask.mutable_data();
    for (int i = 0; i < n; ++i) {
      if (t < static_cast<int>(ids[static_cast<std::size_t>(i)].size())) {
        col[static_cast<std::size_t>(i)] = ids[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
        pm[i] = 1.0;
      }
    }
    Tensor x = embedding_gather(tape, params.embedding, col);
    Tensor gx = linear(tape, x, params.w_input, params.b_input);
    Tensor gh = linear(tape, h, params.w_hidden, params.b_hidden);
    Tensor r = sigmoid(tape, add(tape, slice_cols(tape, gx, 0, l), slice_cols(tape, gh, 0, l)));
    Tensor z = sigmoid(tape, add(tape, slice_cols(tape, gx, l, 2 * l),
                                 slice_cols(tape, gh, l, 2 * l)));
    Tensor cand = tanh(tape, add(tape, slice_cols(tape, gx, 2 * l, 3 * l),
                                 mul(tape, r, slice_cols(tape, gh, 2 * l, 3 * l))));
    Tensor h_new = add(tape, mul(tape, z, h),
                       mul(tape, scale_shift(tape, z, -1.0, 1.0), cand));
    h = lerp_mask(tape, h_new, h, mask);
  }
  return h;
}

// ---------------------------------------------------------------------------
// image encoder: convolution + relu blocks with stride-2 downsampling
// ---------------------------------------------------------------------------

struct ImageEncoderConfig {
  std::vector<int> channels = {16, 32, 64, 64};
  std::vector<int> strides = {2, 2, 2, 1};

  int total_downsampling() const {
    int f = 1;
    for (int s : strides) f *= s;
    return f;
  }
  int out_channels() const { return channels.back(); }
};

struct ImageEncoderParams {
  std::vector<Tensor> weights;  // Co x Ci x 3 x 3 per block
  std::vector<Tensor> biases;
  std::vector<int> strides;

  static ImageEncoderParams init(const ImageEncoderConfig& cfg, Rng& rng) {
    if (cfg.channels.size() != cfg.strides.size())
      throw std::invalid_argument("image encoder: channels/strides size mismatch");
    ImageEncoderParams p;
    p.strides = cfg.strides;
    int ci = 3;
    for (int co : cfg.channels) {
      p.weights.push_back(he_init({co, ci, 3, 3}, ci * 9, rng));
      p.biases.push_back(Tensor({co}));
      ci = co;
    }
    return p;
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor*>>& out) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.emplace_back(prefix + "/block" + std::to_string(i) + "/w", &weights[i]);
      out.emplace_back(prefix + "/block" + std::to_string(i) + "/b", &biases[i]);
    }
  }

  void watch_all(Tape& tape) {
    for (Tensor& w : weights) tape.watch(w);
    for (Tensor& b : biases) tape.watch(b);
  }
};

// images: N x 3 x H x W with values in [0,1] -> N x C x H' x W'
inline Tensor encode_image(Tape& tape, const Tensor& images, const ImageEncoderParams& params,
                           const ImageEncoderConfig& cfg) {
  if (images.ndim() != 4) throw std::invalid_argument("encode_image: expected 4-D input");
  if (images.dim(1) != 3)
    throw std::invalid_argument("encode_image: expected 3 input channels, got " +
                                std::to_string(images.dim(1)));
  const int factor = cfg.total_downsampling();
  if (images.dim(2) % factor != 0 || images.dim(3) % factor != 0)
    throw std::invalid_argument("encode_image: input size not divisible by downsampling factor " +
                                std::to_string(factor));
  Tensor x = images;
  for (std::size_t i = 0; i < params.weights.size(); ++i)
    x = relu(tape, conv2d(tape, x, params.weights[i], params.biases[i], params.strides[i], 1));
  return x;
}

// raw interleaved RGB8 rows (H x W x 3 per sample) -> N x 3 x H x W in [0,1]
inline Tensor images_to_tensor(const std::vector<const std::uint8_t*>& images, int size) {
  const int n = static_cast<int>(images.size());
  Tensor t({n, 3, size, size});
  double* d = t.mutable_data();
  const std::int64_t plane = static_cast<std::int64_t>(size) * size;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* src = images[static_cast<std::size_t>(i)];
    double* dst = d + static_cast<std::int64_t>(i) * 3 * plane;
    for (std::int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c)
        dst[c * plane + p] = static_cast<double>(src[p * 3 + c]) / 255.0;
  }
  return t;
}

}  // namespace vqacl
