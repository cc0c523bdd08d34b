#pragma once

#include <map>
#include <string>
#include <vector>

#include "qrc/tape.hpp"
#include "qrc/tensor.hpp"

namespace qrc {

// Named tensors in insertion order. Group membership is by name prefix
// ("pgn.", "qrn.", "cpn."); non-trainable entries (running statistics)
// are checkpointed but never updated by the optimizer.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool trainable;
    };

    int add(const std::string& name, Tensor<T> value, bool trainable = true) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_[name] = static_cast<int>(entries_.size());
        entries_.push_back({name, std::move(value), trainable});
        return index_[name];
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<T>& operator[](const std::string& name) { return entries_[at(name)].value; }
    const Tensor<T>& operator[](const std::string& name) const { return entries_[at(name)].value; }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    std::vector<std::string> names(const std::string& prefix = "") const {
        std::vector<std::string> out;
        for (const auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) out.push_back(e.name);
        return out;
    }

    bool trainable(const std::string& name) const { return entries_[at(name)].trainable; }

private:
    std::vector<Entry> entries_;
    std::map<std::string, int> index_;

    int at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter name: " + name);
        return it->second;
    }
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Per-step binding of parameters onto a tape. Each parameter becomes one
// leaf node on first use; frozen groups are bound as constants so backward
// skips them entirely.
template <typename T>
class ParamBinding {
public:
    ParamBinding(Tape<T>& tape, const ParamStore<T>& store, std::vector<std::string> live_prefixes)
        : tape_(tape), store_(store), live_(std::move(live_prefixes)) {}

    int operator()(const std::string& name) {
        auto it = nodes_.find(name);
        if (it != nodes_.end()) return it->second;
        bool live = store_.trainable(name) && is_live(name);
        int id = tape_.leaf(store_[name], live);
        nodes_[name] = id;
        return id;
    }

    // Gradients for every bound trainable parameter; zeros where the loss
    // did not reach it.
    GradMap<T> extract(const std::vector<Tensor<T>>& grads) const {
        GradMap<T> out;
        for (const auto& [name, id] : nodes_) {
            if (!store_.trainable(name) || !is_live(name)) continue;
            if (grads[id].numel() != 0)
                out[name] = grads[id];
            else
                out[name] = Tensor<T>::zeros(store_[name].shape);
        }
        return out;
    }

    const std::map<std::string, int>& nodes() const { return nodes_; }

private:
    Tape<T>& tape_;
    const ParamStore<T>& store_;
    std::vector<std::string> live_;
    std::map<std::string, int> nodes_;

    bool is_live(const std::string& name) const {
        for (const auto& p : live_)
            if (name.rfind(p, 0) == 0) return true;
        return false;
    }
};

} // namespace qrc
