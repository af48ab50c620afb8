#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cvattn/tensor.hpp"

namespace cvattn {

/// Ordered record of executed primitives plus accumulated leaf gradients.
///
/// Primitives record themselves on the thread's active tape (see TapeScope)
/// whenever an input requires gradients. Recording order equals execution
/// order, so walking the node list backwards visits the graph in exact
/// reverse topological order. Leaf gradients accumulate additively across
/// reverse passes; running backward twice without reset doubles them.
template <typename S>
class Tape {
public:
    using GradArray = typename Tensor<S>::Storage;

    struct Node {
        const char* name;
        std::function<void(Tape&)> backward;
    };

    static Tape*& active_slot() {
        thread_local Tape* t = nullptr;
        return t;
    }
    static Tape* active() { return active_slot(); }

    void record(const char* name, std::initializer_list<const Tensor<S>*> inputs, Tensor<S>& out,
                std::function<void(Tape&)> backward_fn) {
        for (const Tensor<S>* in : inputs) {
            if (in && in->defined() && in->requires_grad() && !produced_.count(in->id()) &&
                !leaf_index_.count(in->id())) {
                leaf_index_.emplace(in->id(), leaves_.size());
                leaves_.push_back(*in);
            }
        }
        out.set_requires_grad(true);
        produced_.insert(out.id());
        kept_alive_.push_back(out);
        nodes_.push_back(Node{name, std::move(backward_fn)});
    }

    std::size_t node_count() const { return nodes_.size(); }
    const char* node_name(std::size_t i) const { return nodes_[i].name; }

    // --- reverse pass -----------------------------------------------------

    void run_reverse(const Tensor<S>& loss) {
        if (loss.numel() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        }
        // No recording may happen while closures execute.
        Tape* prev = active_slot();
        active_slot() = nullptr;
        scratch_.clear();
        scratch_.emplace(loss.id(), GradArray::Constant(1, S(1)));
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (visit_trace_) visit_trace_->push_back(i);
            nodes_[i].backward(*this);
        }
        for (const Tensor<S>& leaf : leaves_) {
            auto it = scratch_.find(leaf.id());
            GradArray contribution =
                it != scratch_.end() ? it->second : GradArray::Zero(leaf.numel());
            auto acc = grads_.find(leaf.id());
            if (acc == grads_.end()) {
                grads_.emplace(leaf.id(), std::move(contribution));
            } else {
                acc->second += contribution;
            }
        }
        scratch_.clear();
        active_slot() = prev;
    }

    /// Scratch gradient of a node output during the reverse pass; null means
    /// no downstream contribution and the node may skip its work.
    const GradArray* find_grad(const void* id) const {
        auto it = scratch_.find(id);
        return it == scratch_.end() ? nullptr : &it->second;
    }

    void accumulate(const Tensor<S>& target, GradArray g) {
        auto it = scratch_.find(target.id());
        if (it == scratch_.end()) {
            scratch_.emplace(target.id(), std::move(g));
        } else {
            it->second += g;
        }
    }

    // --- accumulated leaf gradients ----------------------------------------

    bool is_leaf(const Tensor<S>& t) const { return leaf_index_.count(t.id()) > 0; }

    /// Accumulated gradient of a requires_grad leaf, as a tensor of its shape.
    Tensor<S> grad(const Tensor<S>& leaf) const {
        auto idx = leaf_index_.find(leaf.id());
        if (idx == leaf_index_.end()) {
            throw Error("grad(): tensor is not a leaf recorded on this tape");
        }
        Tensor<S> g = Tensor<S>::zeros(leaf.shape());
        auto it = grads_.find(leaf.id());
        if (it != grads_.end()) g.raw() = it->second;
        return g;
    }

    void reset_gradients() { grads_.clear(); }

    void set_visit_trace(std::vector<std::size_t>* trace) { visit_trace_ = trace; }

private:
    std::vector<Node> nodes_;
    std::vector<Tensor<S>> leaves_;
    std::unordered_map<const void*, std::size_t> leaf_index_;
    std::unordered_set<const void*> produced_;
    std::vector<Tensor<S>> kept_alive_;  // pins storage so ids stay unique
    std::unordered_map<const void*, GradArray> scratch_;
    std::unordered_map<const void*, GradArray> grads_;
    std::vector<std::size_t>* visit_trace_ = nullptr;
};

/// RAII activation of a tape on the current thread.
template <typename S>
class TapeScope {
public:
    explicit TapeScope(Tape<S>& tape) : prev_(Tape<S>::active_slot()) { Tape<S>::active_slot() = &tape; }
    ~TapeScope() { Tape<S>::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<S>* prev_;
};

/// Runs the reverse pass from a scalar loss.
template <typename S>
void backward(const Tensor<S>& loss, Tape<S>& tape) {
    tape.run_reverse(loss);
}

/// Named parameter collection with stable deterministic iteration order
/// (insertion order). Two stores built from the same config and seed are
/// bitwise identical.
template <typename S>
class ParamStore {
public:
    Tensor<S>& add(const std::string& name, Tensor<S> t) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_.emplace(name, tensors_.size());
        names_.push_back(name);
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }

    std::size_t size() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const Tensor<S>& at(std::size_t i) const { return tensors_[i]; }
    Tensor<S>& mutable_at(std::size_t i) { return tensors_[i]; }

    const Tensor<S>& get(const std::string& name) const { return tensors_[find(name)]; }

    void set(std::size_t i, Tensor<S> t) {
        if (t.shape() != tensors_[i].shape()) {
            throw ShapeError("ParamStore::set: shape " + shape_str(t.shape()) + " != " +
                             shape_str(tensors_[i].shape()) + " for " + names_[i]);
        }
        t.set_requires_grad(true);
        tensors_[i] = std::move(t);
    }

    std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    bool same_values(const ParamStore& o) const {
        if (names_ != o.names_) return false;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (!tensors_[i].same_values(o.tensors_[i])) return false;
        }
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<S>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Gradients for every store entry in store order; zeros for parameters the
/// loss never touched.
template <typename S>
std::vector<Tensor<S>> gradients(const Tape<S>& tape, const ParamStore<S>& params) {
    std::vector<Tensor<S>> out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor<S>& p = params.at(i);
        if (tape.is_leaf(p)) {
            out.push_back(tape.grad(p));
        } else {
            out.push_back(Tensor<S>::zeros(p.shape()));
        }
    }
    return out;
}

}  // namespace cvattn
