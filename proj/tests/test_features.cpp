#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "destine/features.hpp"
#include "testing_util.hpp"

using namespace destine;

namespace {

FieldSchema two_field_schema() {
    FieldSchema schema;
    schema.fields = {{"f1", FieldKind::categorical}, {"f2", FieldKind::categorical}};
    schema.label_column = "label";
    return schema;
}

}  // namespace

TEST_CASE("schema validation") {
    FieldSchema schema = two_field_schema();
    CHECK_NOTHROW(schema.validate());

    schema.fields.push_back({"f1", FieldKind::categorical});
    CHECK_THROWS_AS(schema.validate(), SchemaError);

    schema = two_field_schema();
    schema.fields.push_back({"label", FieldKind::categorical});
    CHECK_THROWS_AS(schema.validate(), SchemaError);

    schema = FieldSchema{};
    CHECK_THROWS_AS(schema.validate(), SchemaError);
}

TEST_CASE("load_csv reads records and preserves missing cells") {
    const auto path = testutil::write_scratch("basic.csv", "label,f1,f2\n1,a,b\n0,,b\n");
    const auto records = load_csv(path, two_field_schema());
    REQUIRE(records.size() == 2);
    CHECK(records[0].label == "1");
    CHECK(records[0].values == std::vector<std::string>{"a", "b"});
    CHECK(records[1].values == std::vector<std::string>{"", "b"});
    CHECK(records[1].line == 3);
}

TEST_CASE("load_csv column handling") {
    // Extra columns are ignored; order comes from the header.
    const auto path =
        testutil::write_scratch("wide.csv", "extra,f2,label,f1\nx,b,1,a\ny,d,0,c\n");
    const auto records = load_csv(path, two_field_schema());
    REQUIRE(records.size() == 2);
    CHECK(records[0].values == std::vector<std::string>{"a", "b"});
    CHECK(records[1].values == std::vector<std::string>{"c", "d"});

    const auto no_label = testutil::write_scratch("nolabel.csv", "f1,f2\na,b\n");
    CHECK_THROWS_AS(load_csv(no_label, two_field_schema()), SchemaError);
    CHECK_NOTHROW(load_csv(no_label, two_field_schema(), /*require_label=*/false));

    const auto no_field = testutil::write_scratch("nofield.csv", "label,f1\n1,a\n");
    try {
        load_csv(no_field, two_field_schema());
        FAIL("expected SchemaError");
    } catch (const SchemaError& e) {
        CHECK(std::string(e.what()).find("f2") != std::string::npos);
    }

    CHECK_THROWS_AS(load_csv("/nonexistent/nowhere.csv", two_field_schema()), IoError);
}

TEST_CASE("load_csv rejects non-binary labels with the line number") {
    const auto path = testutil::write_scratch("badlabel.csv", "label,f1,f2\n1,a,b\n2,c,d\n");
    try {
        load_csv(path, two_field_schema());
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }
}

TEST_CASE("bucketize_numeric") {
    CHECK(bucketize_numeric("") == "B_miss");
    CHECK(bucketize_numeric("abc") == "B_miss");
    CHECK(bucketize_numeric("12x") == "B_miss");
    CHECK(bucketize_numeric("0") == "B_neg");
    CHECK(bucketize_numeric("-3.5") == "B_neg");
    // floor(ln(101)) = floor(4.6151...) = 4
    CHECK(std::floor(std::log1p(100.0)) == 4.0);
    CHECK(bucketize_numeric("100") == "B_4");
    CHECK(bucketize_numeric("1") == "B_0");
    CHECK(bucketize_numeric("2.9") == "B_1");
}

TEST_CASE("build_vocab ordering and thresholds") {
    FieldSchema schema;
    schema.fields = {{"f1", FieldKind::categorical}};
    std::vector<RawRecord> records = {{{"a"}, "1", 2}, {{"a"}, "0", 3}, {{"b"}, "1", 4}};

    const auto vocab = build_vocab(records, schema, 1);
    CHECK(vocab.local_index(0, "a") == 1);
    CHECK(vocab.local_index(0, "b") == 2);
    CHECK(vocab.cardinality(0) == 3);

    const auto thresholded = build_vocab(records, schema, 2);
    CHECK(thresholded.local_index(0, "a") == 1);
    CHECK(thresholded.local_index(0, "b") == 0);  // folds to the OOV slot
    CHECK(thresholded.cardinality(0) == 2);

    CHECK_THROWS_AS(build_vocab(std::vector<RawRecord>{}, schema, 1), DomainError);
}

TEST_CASE("build_vocab breaks frequency ties by token string") {
    FieldSchema schema;
    schema.fields = {{"f1", FieldKind::categorical}};
    std::vector<RawRecord> records = {{{"zz"}, "0", 2}, {{"aa"}, "0", 3}};
    const auto vocab = build_vocab(records, schema, 1);
    CHECK(vocab.local_index(0, "aa") == 1);
    CHECK(vocab.local_index(0, "zz") == 2);
}

TEST_CASE("vocabularies are field scoped with increasing offsets") {
    FieldSchema schema = two_field_schema();
    std::vector<RawRecord> records = {{{"x", "x"}, "1", 2}, {{"x", "y"}, "0", 3}};
    const auto vocab = build_vocab(records, schema, 1);
    CHECK(vocab.offset(0) == 0);
    CHECK(vocab.offset(1) == vocab.cardinality(0));
    CHECK(vocab.global_index(0, "x") != vocab.global_index(1, "x"));
    CHECK(vocab.total_features() == vocab.cardinality(0) + vocab.cardinality(1));
}

TEST_CASE("encode maps tokens, out-of-vocabulary and numerics") {
    FieldSchema schema;
    schema.fields = {{"f1", FieldKind::categorical}, {"amount", FieldKind::numeric}};
    std::vector<RawRecord> records = {{{"a", "100"}, "1", 2}, {{"a", "100"}, "0", 3},
                                      {{"b", "3"}, "1", 4},   {{"b", "3"}, "0", 5}};
    const auto vocab = build_vocab(records, schema, 1);

    const auto sample = encode(records[0], schema, vocab);
    REQUIRE(sample.indices.size() == 2);
    CHECK(sample.indices[0] == vocab.global_index(0, "a"));
    CHECK(sample.label == 1);
    // Numeric field goes through the bucket token.
    CHECK(sample.indices[1] == vocab.global_index(1, "B_4"));

    RawRecord unseen{{"zzz", "99999"}, "0", 9};
    const auto oov = encode(unseen, schema, vocab);
    CHECK(oov.indices[0] == vocab.offset(0));  // OOV slot of field 0
    CHECK(oov.indices[1] == vocab.offset(1) + vocab.local_index(1, "B_11"));

    RawRecord bad{{"a", "1"}, "7", 12};
    CHECK_THROWS_AS(encode(bad, schema, vocab), ParseError);
}

TEST_CASE("encoded indices always land in their field's range") {
    FieldSchema schema = two_field_schema();
    SeededRng rng(5);
    std::vector<RawRecord> records;
    for (int i = 0; i < 200; ++i) {
        records.push_back({{std::string(1, static_cast<char>('a' + rng.next_below(8))),
                            std::string(1, static_cast<char>('a' + rng.next_below(4)))},
                           rng.bernoulli(0.5) ? "1" : "0",
                           static_cast<std::size_t>(i + 2)});
    }
    const auto vocab = build_vocab(records, schema, 2);
    for (const auto& rec : records) {
        const auto sample = encode(rec, schema, vocab);
        for (std::size_t f = 0; f < 2; ++f) REQUIRE(vocab.in_field_range(f, sample.indices[f]));
    }
}

TEST_CASE("split sizes follow floor arithmetic with remainder to train") {
    const auto p10 = split_indices(10, SplitRatios{}, 1);
    CHECK(p10[0].size() == 8);
    CHECK(p10[1].size() == 1);
    CHECK(p10[2].size() == 1);

    const auto p105 = split_indices(105, SplitRatios{}, 1);
    CHECK(p105[0].size() == 85);
    CHECK(p105[1].size() == 10);
    CHECK(p105[2].size() == 10);
}

TEST_CASE("split is deterministic and partitions the index space") {
    SeededRng rng(13);
    for (int round = 0; round < 10; ++round) {
        const std::size_t n = 3 + rng.next_below(500);
        const std::uint64_t seed = rng.next_u64();
        const auto a = split_indices(n, SplitRatios{}, seed);
        const auto b = split_indices(n, SplitRatios{}, seed);
        REQUIRE(a == b);

        std::set<std::size_t> seen;
        std::size_t total = 0;
        for (const auto& part : a) {
            total += part.size();
            seen.insert(part.begin(), part.end());
        }
        REQUIRE(total == n);
        REQUIRE(seen.size() == n);
    }
}

TEST_CASE("split input validation") {
    CHECK_THROWS_AS(split_indices(2, SplitRatios{}, 1), DomainError);
    CHECK_THROWS_AS(split_indices(100, SplitRatios{0.8, 0.1, 0.2}, 1), DomainError);
    CHECK_THROWS_AS(split_indices(100, SplitRatios{1.0, -0.1, 0.1}, 1), DomainError);
}

TEST_CASE("vocab built on the training split never breaks test encoding") {
    FieldSchema schema = two_field_schema();
    SeededRng rng(23);
    std::vector<RawRecord> records;
    for (int i = 0; i < 400; ++i) {
        records.push_back({{std::string(1, static_cast<char>('a' + rng.next_below(20))),
                            std::string(1, static_cast<char>('a' + rng.next_below(12)))},
                           rng.bernoulli(0.4) ? "1" : "0",
                           static_cast<std::size_t>(i + 2)});
    }
    const auto parts = split_indices(records.size(), SplitRatios{}, 99);
    std::vector<RawRecord> train_records;
    for (std::size_t i : parts[0]) train_records.push_back(records[i]);
    const auto vocab = build_vocab(train_records, schema, 2);

    for (std::size_t i : parts[2]) {
        const auto sample = encode(records[i], schema, vocab);
        for (std::size_t f = 0; f < 2; ++f) {
            REQUIRE(sample.indices[f] < vocab.total_features());
            REQUIRE(vocab.in_field_range(f, sample.indices[f]));
        }
    }
}

TEST_CASE("dataset-level split mirrors the index split") {
    FieldSchema schema = two_field_schema();
    std::vector<RawRecord> records;
    for (int i = 0; i < 50; ++i) {
        records.push_back({{"a", "b"}, i % 2 == 0 ? "1" : "0", static_cast<std::size_t>(i + 2)});
    }
    const auto vocab = build_vocab(records, schema, 1);
    Dataset dataset{schema, vocab, {}};
    for (const auto& rec : records) dataset.samples.push_back(encode(rec, schema, vocab));

    const auto [train, val, test] = split(dataset, SplitRatios{}, 7);
    CHECK(train.size() == 40);
    CHECK(val.size() == 5);
    CHECK(test.size() == 5);
    const auto parts = split_indices(50, SplitRatios{}, 7);
    for (std::size_t k = 0; k < parts[1].size(); ++k) {
        CHECK(val.samples[k].label == dataset.samples[parts[1][k]].label);
    }
}
