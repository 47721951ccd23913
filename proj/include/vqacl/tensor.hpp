#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace vqacl {

using Shape = std::vector<int>;

// All numeric buffers share one 64-byte alignment. Vectorized kernels pick
// code paths from runtime pointer alignment; pinning the alignment makes op
// results a function of shapes and values only, never of where the allocator
// happened to place a buffer.
//
// Freed blocks go to a per-thread freelist keyed by size class, so the tape's
// per-batch churn of large activation buffers reuses warm pages instead of
// faulting fresh ones in every step.
//
// Note: Buffer(n) leaves doubles default-initialized (garbage); use it only
// for scratch that is fully overwritten. Buffer(n, 0.0) zero-fills.
namespace detail_alloc {

struct Pool {
  // size class (bytes) -> free blocks
  std::unordered_map<std::size_t, std::vector<void*>> free;
  ~Pool() {
    for (auto& [bytes, blocks] : free)
      for (void* p : blocks) ::operator delete(p, std::align_val_t(64));
  }
};

inline Pool& pool() {
  static thread_local Pool p;
  return p;
}

inline std::size_t size_class(std::size_t bytes) {
  std::size_t c = 64;
  while (c < bytes) c <<= 1;
  return c;
}

}  // namespace detail_alloc

template <typename T, std::size_t Align>
struct AlignedAllocator {
  static_assert(Align == 64, "the block pool assumes one alignment");
  using value_type = T;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) {}

  T* allocate(std::size_t n) {
    const std::size_t cls = detail_alloc::size_class(n * sizeof(T));
    auto& blocks = detail_alloc::pool().free[cls];
    if (!blocks.empty()) {
      void* p = blocks.back();
      blocks.pop_back();
      return static_cast<T*>(p);
    }
    return static_cast<T*>(::operator new(cls, std::align_val_t(Align)));
  }

  void deallocate(T* p, std::size_t n) noexcept {
    const std::size_t cls = detail_alloc::size_class(n * sizeof(T));
    detail_alloc::pool().free[cls].push_back(p);
  }

  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;  // default-init: no zero fill for doubles
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };
  bool operator==(const AlignedAllocator&) const { return true; }
  bool operator!=(const AlignedAllocator&) const { return false; }
};

using Buffer = std::vector<double, AlignedAllocator<double, 64>>;

inline std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major f64 array, optionally attached to a gradient tape via its
// node id. Copies share the buffer; mutable_data() detaches a private copy
// when the buffer is shared, which keeps forward values saved by tape
// closures immutable while parameters are updated in place.
class Tensor {
 public:
  Tensor() : data_(std::make_shared<Buffer>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<Buffer>(static_cast<std::size_t>(shape_numel(shape_)),
                                       0.0)) {}

  Tensor(Shape shape, const std::vector<double>& values)
      : shape_(std::move(shape)),
        data_(std::make_shared<Buffer>(values.begin(), values.end())) {
    if (static_cast<std::int64_t>(data_->size()) != shape_numel(shape_))
      throw std::invalid_argument("tensor: data size does not match shape " +
                                  shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    double* d = t.mutable_data();
    for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_->size()); }

  const double* data() const { return data_->data(); }

  double* mutable_data() {
    if (data_.use_count() > 1) data_ = std::make_shared<Buffer>(*data_);
    return data_->data();
  }

  const Buffer& values() const { return *data_; }

  double at(std::int64_t flat_index) const { return (*data_)[static_cast<std::size_t>(flat_index)]; }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
    return (*data_)[0];
  }

  // Same buffer under a new shape; detached from any tape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw std::invalid_argument("reshape: element count mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  int node() const { return node_; }
  std::uint64_t tape_id() const { return tape_id_; }
  void attach(std::uint64_t tape_id, int node) {
    tape_id_ = tape_id;
    node_ = node;
  }
  bool on_tape() const { return node_ >= 0; }

  // Lazily allocated gradient slot (same shape as data).
  bool has_grad() const { return grad_ != nullptr; }
  const Buffer& grad() const {
    if (!grad_) throw std::logic_error("grad(): no gradient attached");
    return *grad_;
  }
  void set_grad(const Tensor& g) {
    if (g.shape() != shape_)
      throw std::invalid_argument("set_grad: shape mismatch");
    grad_ = std::make_shared<Buffer>(*g.data_);
  }
  void clear_grad() { grad_.reset(); }

 private:
  Shape shape_;
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<Buffer> grad_;
  std::uint64_t tape_id_ = 0;
  int node_ = -1;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void check_finite(const Tensor& t, const char* op) {
  // |x| sums propagate any NaN or Inf, so one vectorizable reduction screens
  // the whole buffer; the elementwise scan only confirms a hit (and clears
  // the rare case where the magnitudes alone overflow the sum)
  const double* d = t.data();
  const std::int64_t n = t.numel();
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 += std::abs(d[i]);
    acc1 += std::abs(d[i + 1]);
    acc2 += std::abs(d[i + 2]);
    acc3 += std::abs(d[i + 3]);
  }
  for (; i < n; ++i) acc0 += std::abs(d[i]);
  if (std::isfinite(acc0 + acc1 + acc2 + acc3)) return;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(d[i]))
      throw std::runtime_error(std::string(op) + ": non-finite value in output");
  }
}

using GradientMap = std::unordered_map<int, Tensor>;

// Dynamic gradient tape: every differentiable op appends one record in
// execution order, which is a topological order of the graph by
// construction. backward() replays the records once, in reverse, and
// accumulates into per-node buffers, so fan-out sums path gradients and a
// replay is bit-identical.
class Tape {
 public:
  enum class Mode { kGrad, kNoGrad };
  using BackwardFn = std::function<void(std::vector<Tensor>&)>;

  explicit Tape(Mode mode = Mode::kGrad)
      : recording_(mode == Mode::kGrad), id_(next_id_.fetch_add(1) + 1) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::uint64_t id() const { return id_; }

  int node_of(const Tensor& t) const {
    return (t.tape_id() == id_) ? t.node() : -1;
  }

  // Registers a leaf tensor (parameter or input). Idempotent per tape.
  int watch(Tensor& t, bool trainable = true) {
    if (!recording_) return -1;
    if (t.tape_id() == id_ && t.node() >= 0) return t.node();
    const int node = static_cast<int>(nodes_.size());
    nodes_.push_back(NodeInfo{t.shape(), trainable, true});
    t.attach(id_, node);
    return node;
  }

  // Registers an op output (non-leaf).
  int intern(Tensor& t) {
    const int node = static_cast<int>(nodes_.size());
    nodes_.push_back(NodeInfo{t.shape(), false, false});
    t.attach(id_, node);
    return node;
  }

  void push_op(const char* name, std::vector<int> inputs, int output, BackwardFn fn) {
    ops_.push_back(OpRecord{name, std::move(inputs), output, std::move(fn)});
  }

  std::size_t num_ops() const { return ops_.size(); }
  std::size_t num_nodes() const { return nodes_.size(); }

  const Shape& node_shape(int node) const { return nodes_[static_cast<std::size_t>(node)].shape; }

  // Accumulation buffer for a node, allocated on first touch. A negative id
  // (constant input) yields nullptr and the contribution is dropped.
  static double* grad_accum(std::vector<Tensor>& grads, int node, const Shape& shape) {
    if (node < 0) return nullptr;
    Tensor& g = grads[static_cast<std::size_t>(node)];
    if (g.numel() == 0) g = Tensor(shape);
    return g.mutable_data();
  }

  // d(scalar_output)/d(leaf) for every trainable leaf, keyed by node id.
  GradientMap backward(const Tensor& scalar_output) const {
    if (node_of(scalar_output) < 0)
      throw std::invalid_argument("backward: tensor not on tape");
    if (scalar_output.numel() != 1)
      throw std::invalid_argument("backward: output must be scalar shape [1]");

    std::vector<Tensor> grads(nodes_.size());
    const int out = scalar_output.node();
    grads[static_cast<std::size_t>(out)] = Tensor::scalar(1.0);

    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      if (grads[static_cast<std::size_t>(it->output)].numel() == 0) continue;  // branch not on the path
      it->backward(grads);
    }

    GradientMap result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const NodeInfo& info = nodes_[i];
      if (!info.leaf || !info.trainable) continue;
      Tensor& g = grads[i];
      result.emplace(static_cast<int>(i),
                     g.numel() ? std::move(g) : Tensor(info.shape));
    }
    return result;
  }

 private:
  struct NodeInfo {
    Shape shape;
    bool trainable = false;
    bool leaf = false;
  };
  struct OpRecord {
    const char* name;
    std::vector<int> inputs;
    int output;
    BackwardFn backward;
  };

  bool recording_;
  std::uint64_t id_;
  std::vector<NodeInfo> nodes_;
  std::vector<OpRecord> ops_;

  inline static std::atomic<std::uint64_t> next_id_{0};
};

inline GradientMap backward(const Tape& tape, const Tensor& scalar_output) {
  return tape.backward(scalar_output);
}

}  // namespace vqacl
