#include <openssl/evp.h>

#include "mqfuzz/experiment.hpp"

namespace mqfuzz {

namespace {

SessionDecl session(std::string id, std::string client_id) {
    SessionDecl s;
    s.id = std::move(id);
    s.connect.client_id = to_bytes(client_id);
    return s;
}

Step on(std::string session_id, Action a) {
    return Step{std::move(session_id), std::move(a)};
}

Bytes hex(std::string_view h) {
    return *from_hex(h);
}

step::Subscribe subscribe(std::string_view filter, std::uint8_t qos) {
    return step::Subscribe{to_bytes(filter), qos, 1};
}

step::Publish publish(Bytes topic, std::string_view payload, std::uint8_t qos,
                      std::optional<std::uint16_t> id = std::nullopt) {
    step::Publish p;
    p.topic = std::move(topic);
    p.payload = to_bytes(payload);
    p.qos = qos;
    p.packet_id = id;
    return p;
}

step::Ack pubrel(std::uint16_t id) {
    return step::Ack{PacketType::Pubrel, id};
}

Experiment base(std::string name, std::string description, InputClass input, std::string client_id) {
    Experiment e;
    e.name = std::move(name);
    e.description = std::move(description);
    e.input = input;
    e.sessions.push_back(session("c", std::move(client_id)));
    return e;
}

// Topic of exactly `size` bytes under the mqfuzz/ prefix.
Bytes sized_topic(std::string_view prefix, std::size_t size) {
    Bytes t = to_bytes(prefix);
    t.resize(size, 'a');
    return t;
}

Experiment qos_pair(std::string name, std::string description, std::string client_id, std::string topic,
                    std::uint8_t second_qos) {
    Experiment e = base(std::move(name), std::move(description), InputClass::Conformant, std::move(client_id));
    const Bytes t = to_bytes(topic);
    e.steps = {
        on("c", subscribe(topic, 2)),
        on("c", publish(t, "1", 2, 1)),
        on("c", publish(t, "2", second_qos, second_qos > 0 ? std::optional<std::uint16_t>(1) : std::nullopt)),
        on("c", pubrel(1)),
    };
    return e;
}

Experiment long_topic(std::size_t size) {
    Experiment e = base("long_topic_" + std::to_string(size),
                        "Subscribe to a valid " + std::to_string(size) +
                            "-byte topic, then publish to it at qos 1. A conformant broker grants the "
                            "subscription and delivers the message with the full topic.",
                        InputClass::Conformant, "mqf-long" + std::to_string(size));
    const Bytes t = sized_topic("mqfuzz/long/", size);
    e.steps = {
        on("c", step::Subscribe{t, 1, 1}),
        on("c", publish(t, "long", 1, 1)),
    };
    return e;
}

Experiment encoded_payload(std::string name, std::string encoding, std::string_view payload_hex) {
    const std::string topic = "mqfuzz/" + name;
    Experiment e = base(name, "Publish a " + encoding + "-encoded payload at qos 1 and expect it delivered unchanged.",
                        InputClass::Conformant, "mqf-" + encoding);
    step::Publish p;
    p.topic = to_bytes(topic);
    p.payload = hex(payload_hex);
    p.qos = 1;
    p.packet_id = 1;
    e.steps = {on("c", subscribe(topic, 1)), on("c", std::move(p))};
    return e;
}

Experiment connect_only(std::string name, std::string description, std::string client_id) {
    Experiment e = base(std::move(name), std::move(description), InputClass::Malformed, std::move(client_id));
    e.steps = {on("c", step::Connect{})};
    return e;
}

}  // namespace

std::vector<Experiment> builtin_corpus() {
    std::vector<Experiment> corpus;

    corpus.push_back(qos_pair("qos2_then_qos1_same_id",
                              "Subscribe; publish qos 2 id 1; publish qos 1 reusing id 1; pubrel id 1. Both "
                              "messages must be delivered once, in publish order.",
                              "mqf-q21", "mqfuzz/qos21", 1));
    corpus.push_back(qos_pair("qos2_then_qos0_same_id",
                              "Subscribe; publish qos 2 id 1; publish qos 0 (no id on the wire); pubrel id 1. "
                              "Delivery order must match publish order.",
                              "mqf-q20", "mqfuzz/qos20", 0));
    {
        Experiment e = base("double_qos2_same_id",
                            "Subscribe; publish qos 2 id 1 twice with different payloads; pubrel id 1 twice. "
                            "The second publish arrives while id 1 is unreleased, so it is a retransmission "
                            "and only the first payload is delivered, once.",
                            InputClass::Conformant, "mqf-q22");
        const Bytes t = to_bytes("mqfuzz/qos22");
        e.steps = {
            on("c", subscribe("mqfuzz/qos22", 2)),
            on("c", publish(t, "1", 2, 1)),
            on("c", publish(t, "2", 2, 1)),
            on("c", pubrel(1)),
            on("c", pubrel(1)),
        };
        corpus.push_back(std::move(e));
    }

    corpus.push_back(long_topic(5000));
    corpus.push_back(long_topic(65535));

    {
        Experiment e = connect_only("non_utf8_client_id",
                                    "CONNECT whose client id bytes are ff fe (not UTF-8). A conformant broker "
                                    "closes the connection.",
                                    "");
        e.sessions[0].connect.client_id = hex("fffe");
        corpus.push_back(std::move(e));
    }
    {
        // Keep-alive sits at offset 10 of a small CONNECT: type, 1-byte
        // length, "MQTT" with its length, level, flags.
        Experiment e = base("keepalive_as_string",
                            "CONNECT whose 2-byte keep-alive is replaced by the length-prefixed string \"60\". "
                            "A conformant broker closes without CONNACK.",
                            InputClass::Malformed, "mqf-ka");
        e.steps = {
            on("c", step::SpliceNext{10, 2, to_bytes(std::string_view("\x00\x02" "60", 4)), true}),
            on("c", step::Connect{}),
        };
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = base("invalid_wildcard_subscribe",
                            "SUBSCRIBE to \"mqfuzz/#/x\". A conformant broker closes the connection.",
                            InputClass::Malformed, "mqf-wsub");
        e.steps = {on("c", subscribe("mqfuzz/#/x", 0))};
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = base("invalid_wildcard_publish",
                            "PUBLISH to \"mqfuzz/+/x\". Wildcards are not allowed in topic names; a conformant "
                            "broker closes the connection.",
                            InputClass::Malformed, "mqf-wpub");
        e.steps = {on("c", publish(to_bytes("mqfuzz/+/x"), "w", 0))};
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = base("topic_utf16",
                            "SUBSCRIBE to \"mqfuzz/utf16\" encoded as UTF-16 with a byte order mark. The bytes "
                            "are not UTF-8 and contain NUL; a conformant broker closes the connection.",
                            InputClass::Malformed, "mqf-utf16");
        e.steps = {on("c", step::Subscribe{hex("fffe6d007100660075007a007a002f0075007400660031003600"), 0, 1})};
        corpus.push_back(std::move(e));
    }
    // Payloads produced offline from "mqfuzz encoded payload".
    corpus.push_back(encoded_payload("payload_zlib", "zlib", "789ccb2d4c2badaa5248cd4bce4f494d512848acccc94f4c010064d008aa"));
    corpus.push_back(encoded_payload("payload_bz2", "bz2",
                                     "425a6839314159265359d7f2dd6f000006118040002f07e230200022868c27a650a6000173c0"
                                     "4b4762d33d87268af8bb9229c28486bf96eb78"));
    corpus.push_back(encoded_payload("payload_base64", "base64",
                                     "6258466d64587036494756755932396b5a57516763474635624739685a413d3d"));
    {
        Experiment e = base("many_slashes_topic",
                            "Subscribe and publish to \"mqfuzz\" followed by 1000 slashes (1001 levels, all but "
                            "the first empty). Valid, but deep; brokers may refuse it. Truncation is an anomaly, "
                            "a refusal is not.",
                            InputClass::Limit, "mqf-slash");
        Bytes t = to_bytes("mqfuzz");
        t.insert(t.end(), 1000, '/');
        e.steps = {on("c", step::Subscribe{t, 1, 1}), on("c", publish(t, "slashes", 1, 1))};
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = base("qos0_flood",
                            "Subscribe, then publish 10000 qos 0 messages back to back on one connection.",
                            InputClass::Conformant, "mqf-flood");
        e.settle_ms = 1000;
        e.steps = {
            on("c", subscribe("mqfuzz/flood", 0)),
            Step{"", step::Repeat{10000, {on("c", publish(to_bytes("mqfuzz/flood"), "f", 0))}}},
        };
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = connect_only("bad_protocol_name",
                                    "CONNECT with protocol name \"MQQT\". A conformant broker refuses (CONNACK 1) "
                                    "or closes.",
                                    "mqf-name");
        e.sessions[0].connect.protocol_name = to_bytes("MQQT");
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = connect_only("bad_protocol_level",
                                    "CONNECT with protocol level 6. A conformant broker answers CONNACK 1 and "
                                    "closes.",
                                    "mqf-level");
        e.sessions[0].connect.protocol_level = 6;
        corpus.push_back(std::move(e));
    }
    {
        Experiment e = base("orphan_pubrel",
                            "PUBREL for id 77, which was never published. A conformant broker answers PUBCOMP "
                            "77 and keeps the connection.",
                            InputClass::Conformant, "mqf-orphan");
        e.steps = {on("c", pubrel(77))};
        corpus.push_back(std::move(e));
    }
    return corpus;
}

std::string corpus_hash(const std::vector<Experiment>& experiments) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const auto& e : experiments) {
        const std::string text = experiment_to_json(e).dump();
        EVP_DigestUpdate(ctx, text.data(), text.size());
        EVP_DigestUpdate(ctx, "\n", 1);
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    return to_hex(ByteView(digest, len));
}

}  // namespace mqfuzz
