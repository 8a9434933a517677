#pragma once

#include "spiraldiff/core.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace spiraldiff {

// Closed whitespace vocabulary. Specials occupy fixed ids 0..3; content
// tokens follow in sorted order so a rebuilt vocabulary is reproducible.
class Vocabulary {
  public:
    static constexpr int kPadId = 0;
    static constexpr int kBosId = 1;
    static constexpr int kEosId = 2;
    static constexpr int kUnkId = 3;

    Vocabulary() { add_specials(); }

    static Vocabulary from_tokens(const std::set<std::string>& content_tokens) {
        Vocabulary v;
        for (const auto& tok : content_tokens) {
            if (v.index_.count(tok)) {
                continue;  // a special spelled out in the data stays a special
            }
            v.index_[tok] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(tok);
        }
        return v;
    }

    // Builds from whitespace-split text lines (typically src+trg of the
    // training split).
    static Vocabulary build_from_texts(const std::vector<std::string>& lines) {
        std::set<std::string> uniq;
        for (const auto& line : lines) {
            std::istringstream iss(line);
            std::string tok;
            while (iss >> tok) {
                uniq.insert(tok);
            }
        }
        return from_tokens(uniq);
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnkId : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) {
            throw ShapeError("Vocabulary: token id " + std::to_string(id) + " out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    bool contains(const std::string& token) const { return index_.count(token) > 0; }

    // One token per line, line number == id.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) {
            throw ConfigError("Vocabulary: cannot write " + path);
        }
        for (const auto& tok : tokens_) {
            out << tok << '\n';
        }
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw ConfigError("Vocabulary: cannot read " + path);
        }
        Vocabulary v;
        v.tokens_.clear();
        v.index_.clear();
        std::string line;
        while (std::getline(in, line)) {
            v.index_[line] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(line);
        }
        if (v.size() < 4 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<bos>"
            || v.tokens_[2] != "<eos>" || v.tokens_[3] != "<unk>") {
            throw ConfigError("Vocabulary: " + path + " is missing the reserved specials");
        }
        return v;
    }

  private:
    void add_specials() {
        tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
        for (int i = 0; i < 4; ++i) {
            index_[tokens_[static_cast<std::size_t>(i)]] = i;
        }
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// Fixed-length id sequence. `len` counts content tokens plus the eos
// terminator; everything after is pad.
struct TokenSequence {
    std::vector<int> ids;
    int len = 0;

    int padded_len() const { return static_cast<int>(ids.size()); }
};

// Whitespace tokenization: truncate to max_len - 1 content tokens, terminate
// with eos, right-pad with pad to max_len. Total function; unknown tokens
// map to unk.
inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
    if (max_len < 1) {
        throw ConfigError("tokenize: max_len must be >= 1");
    }
    TokenSequence seq;
    seq.ids.reserve(static_cast<std::size_t>(max_len));
    std::istringstream iss(text);
    std::string tok;
    while (static_cast<int>(seq.ids.size()) < max_len - 1 && iss >> tok) {
        seq.ids.push_back(vocab.id(tok));
    }
    seq.ids.push_back(Vocabulary::kEosId);
    seq.len = static_cast<int>(seq.ids.size());
    while (static_cast<int>(seq.ids.size()) < max_len) {
        seq.ids.push_back(Vocabulary::kPadId);
    }
    return seq;
}

// Inverse of tokenize on in-vocabulary input: join tokens up to (excluding)
// the first eos, skipping pads.
inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kEosId) {
            break;
        }
        if (id == Vocabulary::kPadId) {
            continue;
        }
        if (!out.empty()) {
            out += ' ';
        }
        out += vocab.token(id);
    }
    return out;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
    return detokenize(seq.ids, vocab);
}

}  // namespace spiraldiff
