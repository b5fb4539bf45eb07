#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <set>

#include "dlab/error.hpp"
#include "dlab/prompt.hpp"

using namespace dlab;

namespace {

// FNV-1a over the float32 image bytes.
std::uint64_t image_hash(const LatentGrid& g) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : g.data()) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
        for (int i = 0; i < 4; ++i) {
            h ^= (bits >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

const Vocabulary vocab = Vocabulary::standard();

}  // namespace

TEST_CASE("render_example is deterministic and bounded") {
    PromptSpec p = make_prompt(vocab, 3, 7);
    LatentGrid a = render_example(vocab, p, 99, 16, 16);
    LatentGrid b = render_example(vocab, p, 99, 16, 16);
    CHECK(a == b);
    CHECK(a.channels() == 3);
    for (double v : a.data()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK(render_example(vocab, p, 100, 16, 16) != a);
}

TEST_CASE("render_example: golden red circle") {
    LatentGrid img = render_example(vocab, make_prompt(vocab, 0, 0), 7, 16, 16);
    // Frozen from the reference renderer.
    CHECK(image_hash(img) == 2178355429160206267ull);
}

TEST_CASE("render_example: attribute changes only the glyph interior") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        for (int noun = 0; noun < vocab.n_nouns(); ++noun) {
            PromptSpec p = make_prompt(vocab, noun, 0), q = make_prompt(vocab, noun, 8);
            LatentGrid a = render_example(vocab, p, seed, 16, 16), b = render_example(vocab, q, seed, 16, 16);
            LatentGrid mask = render_glyph_mask(vocab, p, seed, 16, 16);
            int inside_diff = 0;
            for (int r = 0; r < 16; ++r) {
                for (int c = 0; c < 16; ++c) {
                    bool differs = false;
                    for (int ch = 0; ch < 3; ++ch) differs |= a.at(ch, r, c) != b.at(ch, r, c);
                    if (mask.at(0, r, c) == 0.0) {
                        CHECK_FALSE(differs);
                    } else {
                        inside_diff += differs;
                    }
                }
            }
            CHECK(inside_diff > 0);
        }
    }
}

TEST_CASE("render_example rejects bad ids") {
    CHECK_THROWS_AS(render_example(vocab, {8, 0, AttributeKind::color}, 1, 16, 16), VocabularyError);
    CHECK_THROWS_AS(render_example(vocab, {0, 10, AttributeKind::texture}, 1, 16, 16), VocabularyError);
    CHECK_THROWS_AS(make_prompt(vocab, -1, 0), VocabularyError);
}

TEST_CASE("zero-jitter templates are pairwise distinct") {
    std::set<std::uint64_t> hashes;
    for (int n = 0; n < vocab.n_nouns(); ++n) {
        for (int a = 0; a < vocab.n_attrs(); ++a) {
            hashes.insert(image_hash(render_example(vocab, make_prompt(vocab, n, a), 0, 16, 16, 0.0)));
        }
    }
    CHECK(hashes.size() == 80);
}

TEST_CASE("build_promptset") {
    auto all = build_promptset({8, 6, 4, 80}, 5);
    CHECK(all.size() == 80);
    std::set<std::pair<int, int>> uniq;
    for (const auto& p : all) uniq.insert({p.noun_id, p.attribute_id});
    CHECK(uniq.size() == 80);

    CHECK(build_promptset({8, 6, 4, 30}, 9) == build_promptset({8, 6, 4, 30}, 9));
    CHECK(build_promptset({8, 6, 4, 30}, 9) != build_promptset({8, 6, 4, 30}, 10));

    for (int count : {2, 10, 40, 64}) {
        auto ps = build_promptset({8, 6, 4, count}, 1);
        int colors = 0;
        for (const auto& p : ps) colors += p.attribute_kind == AttributeKind::color;
        CHECK(std::abs(colors - (count - colors)) <= 1);
    }
    CHECK_THROWS_AS(build_promptset({8, 6, 4, 81}, 1), CapacityError);
}

TEST_CASE("encode_prompt layout") {
    PromptEncoder enc(vocab, {8, 16, 1234});
    TokenSequence s = enc.encode(make_prompt(vocab, 2, 3));
    std::vector<TokenClass> expect{TokenClass::sos, TokenClass::sem, TokenClass::sem, TokenClass::sem,
                                   TokenClass::eos, TokenClass::eos, TokenClass::eos, TokenClass::eos};
    CHECK(s.tags == expect);
    CHECK(s.length == 8);
    CHECK(s.dim == 16);
    for (int i = 5; i < 8; ++i) {
        for (int k = 0; k < 16; ++k) CHECK(s.token(i)[k] == s.token(4)[k]);
    }
    CHECK(enc.encode(make_prompt(vocab, 2, 3)) == s);

    TokenSequence null = enc.null_condition();
    CHECK(null.tags[0] == TokenClass::sos);
    CHECK(null.count(TokenClass::sem) == 0);
    CHECK(null.count(TokenClass::eos) == 7);
    CHECK(null == enc.encode(std::nullopt));
    // SOS vector is shared.
    for (int k = 0; k < 16; ++k) CHECK(null.token(0)[k] == s.token(0)[k]);
}

TEST_CASE("encoder is injective over the vocabulary") {
    PromptEncoder enc(vocab, {});
    CHECK(enc.min_eos_separation() > 0.0);
    // Independent scan.
    std::vector<std::vector<float>> eos;
    for (int n = 0; n < vocab.n_nouns(); ++n) {
        for (int a = 0; a < vocab.n_attrs(); ++a) {
            TokenSequence s = enc.encode(make_prompt(vocab, n, a));
            eos.emplace_back(s.token(4), s.token(4) + 16);
        }
    }
    for (std::size_t i = 0; i < eos.size(); ++i) {
        for (std::size_t j = i + 1; j < eos.size(); ++j) CHECK(eos[i] != eos[j]);
    }
}

TEST_CASE("apply_surgery: switch_eos") {
    PromptEncoder enc(vocab, {});
    TokenSequence a = enc.encode(make_prompt(vocab, 1, 2));
    TokenSequence b = enc.encode(make_prompt(vocab, 5, 7));
    const TokenSequence a_copy = a;

    SurgerySpec sw;
    CHECK(apply_surgery(a, &a, sw) == a);

    TokenSequence ab = apply_surgery(a, &b, sw);
    CHECK(a == a_copy);
    for (int i = 0; i < 4; ++i) {
        for (int k = 0; k < 16; ++k) CHECK(ab.token(i)[k] == a.token(i)[k]);
    }
    for (int i = 4; i < 8; ++i) {
        for (int k = 0; k < 16; ++k) CHECK(ab.token(i)[k] == b.token(4)[k]);
    }
    CHECK(apply_surgery(ab, &a, sw) == a);
    CHECK_THROWS_AS(apply_surgery(a, nullptr, sw), ConfigurationError);
}

TEST_CASE("apply_surgery: zero, random, sos_only, eos_only") {
    PromptEncoder enc(vocab, {});
    TokenSequence a = enc.encode(make_prompt(vocab, 4, 1));

    TokenSequence z = apply_surgery(a, nullptr, {SurgeryKind::zero_class, TokenClass::sem});
    for (int i = 1; i < 4; ++i) {
        for (int k = 0; k < 16; ++k) CHECK(z.token(i)[k] == 0.0f);
    }
    for (int k = 0; k < 16; ++k) CHECK(z.token(4)[k] == a.token(4)[k]);

    SurgerySpec rnd{SurgeryKind::random_class, TokenClass::eos, 1, KvScope::both, 5};
    TokenSequence r1 = apply_surgery(a, nullptr, rnd), r2 = apply_surgery(a, nullptr, rnd);
    CHECK(r1 == r2);
    for (int k = 0; k < 16; ++k) CHECK(r1.token(2)[k] == a.token(2)[k]);
    CHECK(r1.token(4)[0] != a.token(4)[0]);

    TokenSequence so = apply_surgery(a, nullptr, {SurgeryKind::sos_only});
    for (int i = 0; i < 8; ++i) {
        for (int k = 0; k < 16; ++k) CHECK(so.token(i)[k] == a.token(0)[k]);
    }

    TokenSequence eo = apply_surgery(a, nullptr, {SurgeryKind::eos_only});
    for (int k = 0; k < 16; ++k) CHECK(eo.token(0)[k] == a.token(0)[k]);
    for (int i = 1; i < 8; ++i) {
        for (int k = 0; k < 16; ++k) CHECK(eo.token(i)[k] == a.token(4)[k]);
    }
    CHECK(eo.count(TokenClass::eos) == 7);
}

TEST_CASE("apply_surgery: repeat_sem") {
    PromptEncoder enc(vocab, {});
    TokenSequence a = enc.encode(make_prompt(vocab, 0, 0));
    SurgerySpec rep{SurgeryKind::repeat_sem, TokenClass::sem, 2};
    TokenSequence r = apply_surgery(a, nullptr, rep);
    std::vector<TokenClass> expect{TokenClass::sos, TokenClass::sem, TokenClass::sem, TokenClass::sem,
                                   TokenClass::sem, TokenClass::sem, TokenClass::sem, TokenClass::eos};
    CHECK(r.tags == expect);
    CHECK(a.count(TokenClass::eos) == 4);
    CHECK(r.count(TokenClass::eos) == 1);
    for (int k = 0; k < 16; ++k) {
        CHECK(r.token(4)[k] == a.token(1)[k]);
        CHECK(r.token(7)[k] == a.token(4)[k]);
    }
    rep.repeat_count = 3;
    CHECK_THROWS_AS(apply_surgery(a, nullptr, rep), CapacityError);
}

TEST_CASE("every surgery preserves length and dim and carries kv_scope") {
    PromptEncoder enc(vocab, {});
    TokenSequence a = enc.encode(make_prompt(vocab, 6, 9));
    TokenSequence b = enc.encode(make_prompt(vocab, 2, 1));
    for (auto kind : {SurgeryKind::switch_eos, SurgeryKind::zero_class, SurgeryKind::random_class,
                      SurgeryKind::sos_only, SurgeryKind::eos_only, SurgeryKind::repeat_sem}) {
        SurgerySpec spec{kind, TokenClass::eos, 2, KvScope::key_only, 3};
        TokenSequence out = apply_surgery(a, &b, spec);
        CHECK(out.length == a.length);
        CHECK(out.dim == a.dim);
        CHECK(out.tokens.size() == a.tokens.size());
        CHECK(out.kv_scope == KvScope::key_only);
    }
}
