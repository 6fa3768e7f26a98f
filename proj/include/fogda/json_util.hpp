#pragma once

// Strict JSON object reading: every key must be known, types must match.

#include <set>
#include <string>

#include "json.hpp"

#include "fogda/errors.hpp"

namespace fogda {

using Json = nlohmann::json;

class StrictReader {
public:
    StrictReader(const Json& obj, std::string context) : obj_(obj), context_(std::move(context)) {
        if (!obj_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
    }

    // Reads `key` into `out` when present; absent keys keep their default.
    template <class T>
    StrictReader& get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return *this;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(context_ + "." + key + ": " + e.what());
        }
        return *this;
    }

    // Reads a nested object with a callback taking a StrictReader.
    template <class F>
    StrictReader& object(const std::string& key, F&& read) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return *this;
        StrictReader nested(*it, context_ + "." + key);
        read(nested);
        nested.finish();
        return *this;
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(context_ + ": unknown key \"" + it.key() + "\"");
        }
    }

private:
    const Json& obj_;
    std::string context_;
    std::set<std::string> seen_;
};

}  // namespace fogda
