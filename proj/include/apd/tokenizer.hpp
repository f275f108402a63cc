#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <string>
#include <vector>

#include "apd/errors.hpp"

namespace apd {

// Deterministic lowercase word-level tokenizer. The vocabulary is built
// once, from the prompt template plus every class name, so there is no
// external tokenizer dependence. Id 0 is padding, id 1 marks sequence
// start (also the pooling position of the text encoder).
class Tokenizer {
public:
    static constexpr int kPadId = 0;
    static constexpr int kBosId = 1;

    static std::string normalize(const std::string& s) {
        std::string out;
        out.reserve(s.size());
        for (char c : s) {
            if (c == '_') {
                out.push_back(' ');
            } else {
                out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            }
        }
        return out;
    }

    static std::vector<std::string> words(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char c : normalize(s)) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out.push_back(std::move(cur));
        return out;
    }

    // template_text must contain exactly one "{}" placeholder.
    static Tokenizer build(const std::string& template_text,
                           const std::vector<std::string>& class_names) {
        if (count_placeholders(template_text) != 1)
            throw config_error("template must contain exactly one {} placeholder");
        Tokenizer t;
        t.template_ = template_text;
        std::vector<std::string> all = words(strip_placeholder(template_text));
        for (const auto& name : class_names) {
            if (name.empty()) throw input_error("empty class name");
            auto w = words(name);
            all.insert(all.end(), w.begin(), w.end());
        }
        std::sort(all.begin(), all.end());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        int id = 2;
        for (const auto& w : all) t.vocab_[w] = id++;
        return t;
    }

    int vocab_size() const { return 2 + static_cast<int>(vocab_.size()); }
    const std::map<std::string, int>& vocab() const { return vocab_; }
    const std::string& prompt_template() const { return template_; }

    // [bos, words..., pad...] clipped/padded to context_length.
    std::vector<int> encode(const std::string& text, int context_length) const {
        std::vector<int> ids{kBosId};
        for (const auto& w : words(text)) {
            auto it = vocab_.find(w);
            if (it == vocab_.end())
                throw input_error("token '" + w + "' not in vocabulary (from: " + text + ")");
            ids.push_back(it->second);
        }
        ids.resize(static_cast<std::size_t>(context_length), kPadId);
        return ids;
    }

    std::string fill_template(const std::string& class_name) const {
        const auto pos = template_.find("{}");
        std::string filled = template_;
        filled.replace(pos, 2, normalize(class_name));
        return filled;
    }

private:
    static int count_placeholders(const std::string& t) {
        int n = 0;
        for (std::size_t p = t.find("{}"); p != std::string::npos; p = t.find("{}", p + 2)) ++n;
        return n;
    }
    static std::string strip_placeholder(const std::string& t) {
        std::string s = t;
        const auto pos = s.find("{}");
        if (pos != std::string::npos) s.replace(pos, 2, " ");
        return s;
    }

    std::string template_;
    std::map<std::string, int> vocab_;
};

// One token sequence per class, in class-index order.
inline std::vector<std::vector<int>> build_class_prompts(
    const std::vector<std::string>& class_names, const Tokenizer& tok, int context_length) {
    std::vector<std::vector<int>> out;
    out.reserve(class_names.size());
    for (const auto& name : class_names) {
        try {
            out.push_back(tok.encode(tok.fill_template(name), context_length));
        } catch (const input_error& e) {
            throw input_error("class '" + name + "': " + e.what());
        }
    }
    return out;
}

}  // namespace apd
