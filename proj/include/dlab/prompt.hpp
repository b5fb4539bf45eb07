#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dlab/grid.hpp"

namespace dlab {

enum class AttributeKind { color, texture };

// Toy vocabulary: nouns select the glyph outline, attributes the fill.
// Attribute ids [0, n_colors) are colors, [n_colors, n_colors + n_textures)
// are textures.
struct Vocabulary {
    std::vector<std::string> nouns;
    std::vector<std::string> colors;
    std::vector<std::string> textures;

    int n_nouns() const { return static_cast<int>(nouns.size()); }
    int n_colors() const { return static_cast<int>(colors.size()); }
    int n_textures() const { return static_cast<int>(textures.size()); }
    int n_attrs() const { return n_colors() + n_textures(); }
    const std::string& attribute_word(int attribute_id) const;
    AttributeKind kind_of(int attribute_id) const;

    static Vocabulary standard();
};

struct PromptSpec {
    int noun_id      = 0;
    int attribute_id = 0;
    AttributeKind attribute_kind = AttributeKind::color;

    friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

PromptSpec make_prompt(const Vocabulary& vocab, int noun_id, int attribute_id);
std::string prompt_text(const Vocabulary& vocab, const PromptSpec& p);
const char* to_string(AttributeKind kind);

// Renders "a {attribute} {noun}" as a 3-channel image in [-1, 1]. The glyph
// centre and scale are jittered from `jitter_seed`; `jitter_amount` = 0 gives
// the canonical template. Jitter depends only on the seed, so two prompts
// rendered with one seed share the glyph placement.
LatentGrid render_example(const Vocabulary& vocab, const PromptSpec& p, std::uint64_t jitter_seed, int rows, int cols,
                          double jitter_amount = 1.0);

// Glyph membership mask (1 channel, values 0/1) for the same placement.
LatentGrid render_glyph_mask(const Vocabulary& vocab, const PromptSpec& p, std::uint64_t jitter_seed, int rows,
                             int cols, double jitter_amount = 1.0);

struct PromptSetConfig {
    int n_nouns    = 8;
    int n_colors   = 6;
    int n_textures = 4;
    int count      = 80;
};

// Seeded sample without replacement, balanced between color and texture
// prompts as far as each pool allows.
std::vector<PromptSpec> build_promptset(const PromptSetConfig& config, std::uint64_t seed);

struct Example {
    PromptSpec prompt;
    std::uint64_t jitter_seed = 0;
    LatentGrid image;
};

// `per_prompt` jittered renders of each prompt; jitter seeds are derived from
// (seed, example index).
std::vector<Example> make_dataset(const Vocabulary& vocab, const std::vector<PromptSpec>& prompts, int per_prompt,
                                  std::uint64_t seed, int rows, int cols, double jitter_amount = 1.0);

// Writes img_{i}.f32 + labels.csv into `dir`.
void export_dataset(const std::vector<Example>& data, const std::string& dir);
// Writes the vocabulary as one "kind id word" line per entry.
void write_vocabulary(const Vocabulary& vocab, const std::string& path);

// ---------------------------------------------------------------------------
// Token sequences

enum class TokenClass { sos, sem, eos };
enum class KvScope { both, key_only, value_only };

struct TokenSequence {
    int length = 0;
    int dim    = 0;
    std::vector<float> tokens;  // length x dim, row-major
    std::vector<TokenClass> tags;
    std::optional<PromptSpec> provenance;
    KvScope kv_scope = KvScope::both;

    const float* token(int i) const { return tokens.data() + static_cast<std::size_t>(i) * dim; }
    float* token(int i) { return tokens.data() + static_cast<std::size_t>(i) * dim; }
    int count(TokenClass c) const;
    // Index of the first EOS token, or -1.
    int first_eos() const;

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

const char* to_string(TokenClass c);

struct EncoderConfig {
    int length = 8;
    int dim    = 16;
    std::uint64_t seed = 1234;
};

// Frozen autoregressive prompt encoder. SEM tokens are embedding-table rows
// for "a", the attribute word and the noun word; every EOS slot holds the
// terminal state of h_{k+1} = tanh(A h_k + B e_k) scanned over SOS + SEM.
class PromptEncoder {
public:
    PromptEncoder(const Vocabulary& vocab, const EncoderConfig& config);

    // nullopt encodes the empty prompt, which is the null condition.
    TokenSequence encode(const std::optional<PromptSpec>& prompt) const;
    TokenSequence null_condition() const { return encode(std::nullopt); }

    const EncoderConfig& config() const { return config_; }
    const Vocabulary& vocabulary() const { return vocab_; }

    // Smallest pairwise distance between EOS vectors over all prompts and the
    // empty prompt. Checked positive at construction.
    double min_eos_separation() const { return min_eos_separation_; }

private:
    std::vector<float> word_embedding(int word) const;
    std::vector<float> terminal_state(const std::vector<std::vector<float>>& inputs) const;

    Vocabulary vocab_;
    EncoderConfig config_;
    std::vector<float> sos_;
    std::vector<float> table_;  // words x dim: "a", attributes, nouns
    std::vector<float> rec_a_;  // dim x dim
    std::vector<float> rec_b_;  // dim x dim
    double min_eos_separation_ = 0.0;
};

enum class SurgeryKind { switch_eos, zero_class, random_class, sos_only, eos_only, repeat_sem };

struct SurgerySpec {
    SurgeryKind kind         = SurgeryKind::switch_eos;
    TokenClass target_class  = TokenClass::eos;
    int repeat_count         = 1;
    KvScope kv_scope         = KvScope::both;
    std::uint64_t seed       = 0;
};

// Pure token-level transform; `b` is required for switch_eos only.
TokenSequence apply_surgery(const TokenSequence& a, const TokenSequence* b, const SurgerySpec& spec);

}  // namespace dlab
